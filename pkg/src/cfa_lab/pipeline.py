"""Runtime collaboration: messages, checkpoints, warping, and fusion rounds.

One round is: every agent renders its own frame, encodes it, adapts the
feature into the shared protocol domain, and broadcasts it to the agents
within the collaborative range ``delta``.  A receiver reverts incoming
features into its own domain, warps them into its ego frame using the
*reported* sender pose, fuses them with its own (untouched) feature, and
decodes.  The ego feature never passes through an adapter/reverter pair.

The byte formats defined here (broadcast messages, checkpoints) are versioned
and bit-exact: serialize -> deserialize round-trips reproduce the input
exactly, and the same weights always produce the same bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numeric as nm
from .errors import CheckpointError, ConfigurationError, DimensionError, ProtocolError
from .numeric.grid import MAX_AXES
from .models import (
    AgentModel,
    AgentSpec,
    Box,
    DetectionOutput,
    decode_boxes,
    nms,
)
from .seeding import derive_rng
from .world import (
    GroundTruth,
    Pose,
    WorldConfig,
    WorldState,
    _cardinal_quadrant,
    make_ground_truth,
    perturb_pose,
    render_frame,
)

MESSAGE_MAGIC = b"CFA1"
MESSAGE_VERSION = 1
# magic 4s | version u16 | agent_id u32 | W,H,C u16 | pose x,y,yaw f32.
# The 4-byte payload length follows the header as a framing prefix.
_HEADER = struct.Struct("<4sHIHHHfff")
_LEN = struct.Struct("<I")

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1

MODES = ("non_collab", "collab_no_cfa", "stamp", "late_fusion")


# ---------------------------------------------------------------------------
# broadcast messages


@dataclass
class BroadcastMessage:
    """One agent's shared feature plus the pose it claims to be at."""

    agent_id: int
    width: int
    height: int
    channels: int
    pose: Pose
    payload: np.ndarray  # (C, H, W) float32
    version: int = MESSAGE_VERSION

    def payload_bytes(self) -> int:
        return 4 * self.width * self.height * self.channels


def message_from_feature(agent_id: int, feature: nm.Grid, pose: Pose) -> BroadcastMessage:
    if feature.values.ndim != 4 or feature.shape[0] != 1:
        raise DimensionError(f"broadcast feature must be (1, C, H, W), got {feature.shape}")
    payload = np.ascontiguousarray(feature.values[0], dtype=np.float32)
    c, h, w = payload.shape
    return BroadcastMessage(agent_id=agent_id, width=w, height=h, channels=c, pose=pose, payload=payload)


def feature_from_message(msg: BroadcastMessage) -> nm.Grid:
    return nm.constant(msg.payload[None, ...])


def serialize_message(msg: BroadcastMessage) -> bytes:
    payload = np.ascontiguousarray(msg.payload, dtype="<f4")
    if payload.shape != (msg.channels, msg.height, msg.width):
        raise ProtocolError(
            f"payload shape {payload.shape} does not match header "
            f"({msg.channels}, {msg.height}, {msg.width})"
        )
    head = _HEADER.pack(
        MESSAGE_MAGIC,
        msg.version,
        msg.agent_id,
        msg.width,
        msg.height,
        msg.channels,
        msg.pose.x,
        msg.pose.y,
        msg.pose.yaw,
    )
    body = payload.tobytes()
    return head + _LEN.pack(len(body)) + body


def deserialize_message(data: bytes) -> BroadcastMessage:
    if len(data) < _HEADER.size + _LEN.size:
        raise ProtocolError(f"message truncated: {len(data)} bytes is shorter than the header")
    magic, version, agent_id, w, h, c, x, y, yaw = _HEADER.unpack_from(data, 0)
    if magic != MESSAGE_MAGIC:
        raise ProtocolError(f"bad magic {magic!r}, expected {MESSAGE_MAGIC!r}")
    if version != MESSAGE_VERSION:
        raise ProtocolError(f"unsupported message version {version}")
    (payload_len,) = _LEN.unpack_from(data, _HEADER.size)
    expected = 4 * w * h * c
    if payload_len != expected:
        raise ProtocolError(f"payload_len {payload_len} does not equal 4*W*H*C = {expected}")
    body = data[_HEADER.size + _LEN.size :]
    if len(body) != payload_len:
        raise ProtocolError(f"payload truncated: got {len(body)} bytes, payload_len says {payload_len}")
    payload = np.frombuffer(body, dtype="<f4").reshape(c, h, w).copy()
    return BroadcastMessage(
        agent_id=agent_id,
        width=w,
        height=h,
        channels=c,
        pose=Pose(float(x), float(y), float(yaw)),
        payload=payload,
        version=version,
    )


# ---------------------------------------------------------------------------
# checkpoints


def serialize_checkpoint(store: nm.ParamStore) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(store.names()))]
    for name, grid in store.items():
        encoded = name.encode("utf-8")
        values = np.ascontiguousarray(grid.values, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.tobytes())
    return b"".join(parts)


def save_checkpoint(store: nm.ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(store))


def deserialize_checkpoint(data: bytes) -> nm.ParamStore:
    cursor = 0

    def take(n: int, what: str) -> bytes:
        nonlocal cursor
        if cursor + n > len(data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = data[cursor : cursor + n]
        cursor += n
        return chunk

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    store = nm.ParamStore()
    for index in range(count):
        label = f"entry {index}"
        (name_len,) = struct.unpack("<H", take(2, f"{label} name length"))
        name = take(name_len, f"{label} name").decode("utf-8")
        label = f"entry {name!r}"
        (rank,) = struct.unpack("<I", take(4, f"{label} rank"))
        if rank > MAX_AXES:
            raise CheckpointError(f"{label} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{label} dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * n_values, f"{label} data")
        values = np.frombuffer(raw, dtype="<f4")
        store.add(name, values.reshape(dims).copy())
    if cursor != len(data):
        raise CheckpointError(
            f"checkpoint has {len(data) - cursor} trailing bytes after the last entry"
        )
    return store


def load_checkpoint(path) -> nm.ParamStore:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())


def restore_params(target: nm.ParamStore, source: nm.ParamStore) -> None:
    """Copy values from a loaded store into a live model store, by name."""
    loaded = dict(source.items())
    for name, grid in target.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing entry {name!r}")
        values = loaded.pop(name).values
        if values.shape != grid.values.shape:
            raise CheckpointError(
                f"checkpoint entry {name!r} has shape {values.shape}, model expects {grid.values.shape}"
            )
        grid.values[...] = values
    if loaded:
        extra = sorted(loaded)[0]
        raise CheckpointError(f"checkpoint has unexpected entry {extra!r}")


# ---------------------------------------------------------------------------
# spatial alignment


def relative_pose(sender: Pose, receiver: Pose) -> Pose:
    """Sender frame expressed in receiver ego coordinates."""
    dx = sender.x - receiver.x
    dy = sender.y - receiver.y
    cy, sy = math.cos(receiver.yaw), math.sin(receiver.yaw)
    return Pose(cy * dx + sy * dy, -sy * dx + cy * dy, sender.yaw - receiver.yaw)


def warp_feature(feature: nm.Grid, relative: Pose, out_size: int, view_radius: float) -> nm.Grid:
    """Resample a sender BEV grid into the receiver ego frame.

    Both grids are square and span [-view_radius, +view_radius] in their own
    frames; ``relative`` is the sender pose in receiver coordinates.  Cells
    that fall outside the sender grid come back as zero.
    """
    if feature.values.ndim != 4:
        raise DimensionError(f"warp_feature expects (B, C, H, W), got {feature.shape}")
    w_in = feature.shape[3]
    if feature.shape[2] != w_in:
        raise DimensionError(f"warp_feature expects a square grid, got {feature.shape}")
    cell_out = 2.0 * view_radius / out_size
    cell_in = 2.0 * view_radius / w_in
    coords = (np.arange(out_size, dtype=np.float64) + 0.5) * cell_out - view_radius
    ex, ey = np.meshgrid(coords, coords)  # receiver ego meters; rows follow +y
    # receiver point -> sender frame: rotate by -relative.yaw about the offset
    px = ex - relative.x
    py = ey - relative.y
    cy, sy = math.cos(relative.yaw), math.sin(relative.yaw)
    sx = cy * px + sy * py
    sy_ = -sy * px + cy * py
    cols = (sx + view_radius) / cell_in - 0.5
    rows = (sy_ + view_radius) / cell_in - 0.5
    return nm.bilinear_sample(feature, cols, rows)


def transform_box(box: Box, sender: Pose, receiver: Pose) -> Box:
    """Re-express a sender ego-frame box in the receiver ego frame."""
    qs = _cardinal_quadrant(sender.yaw)
    qr = _cardinal_quadrant(receiver.yaw)
    wx, wy = _rot_quadrant(box.center_x, box.center_y, qs)
    wx += sender.x
    wy += sender.y
    rx, ry = _rot_quadrant(wx - receiver.x, wy - receiver.y, (-qr) % 4)
    swap = (qs - qr) % 2 == 1
    return Box(
        center_x=rx,
        center_y=ry,
        width=box.height if swap else box.width,
        height=box.width if swap else box.height,
        direction=(box.direction + qs - qr) % 2,
        score=box.score,
    )


def _rot_quadrant(x: float, y: float, q: int) -> Tuple[float, float]:
    q %= 4
    if q == 0:
        return x, y
    if q == 1:
        return -y, x
    if q == 2:
        return -x, -y
    return y, -x


# ---------------------------------------------------------------------------
# collaboration rounds


@dataclass
class CollabRound:
    """One evaluated scene: who is where, and what everyone claims."""

    world: WorldState
    specs: Tuple[AgentSpec, ...]
    true_poses: Tuple[Pose, ...]
    reported_poses: Tuple[Pose, ...]
    delta: float
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if not len(self.specs) == len(self.true_poses) == len(self.reported_poses):
            raise ConfigurationError(
                f"round has {len(self.specs)} specs, {len(self.true_poses)} true poses, "
                f"{len(self.reported_poses)} reported poses"
            )

    def neighbors(self, i: int) -> List[int]:
        """Indices whose reported position lies within delta of i's report."""
        pi = self.reported_poses[i]
        out = []
        for j, pj in enumerate(self.reported_poses):
            if j == i:
                continue
            if math.hypot(pi.x - pj.x, pi.y - pj.y) <= self.delta:
                out.append(j)
        return out


def make_round(
    world: WorldState,
    specs: Sequence[AgentSpec],
    true_poses: Sequence[Pose],
    delta: float,
    sigma: float,
    seed: int,
    scene_key: int = 0,
) -> CollabRound:
    """Attach reported poses: true poses plus seeded Gaussian position noise.

    The noise rng depends on (seed, scene, agent) but not on sigma, so sweeps
    over sigma reuse one unit draw per agent scaled by sigma.  Paired draws
    make metric-vs-sigma curves comparable without averaging away the effect.
    """
    reported = tuple(
        perturb_pose(pose, sigma, derive_rng(seed, "pose_noise", scene_key, i))
        for i, pose in enumerate(true_poses)
    )
    return CollabRound(
        world=world,
        specs=tuple(s.validate() for s in specs),
        true_poses=tuple(true_poses),
        reported_poses=reported,
        delta=float(delta),
        sigma=float(sigma),
    )


@dataclass
class AgentRoundResult:
    agent_id: int
    task: str
    output: Union[DetectionOutput, nm.Grid, None]
    ground_truth: GroundTruth
    boxes: Optional[List[Box]] = None
    n_received: int = 0


def _plain_bridge(feature: nm.Grid, channels: int, resolution: int) -> nm.Grid:
    """Force a foreign feature into the ego shape with no learned alignment.

    Spatial mismatch is bridged by bilinear resize, channel mismatch by
    truncation / zero padding.
    """
    out = nm.resize_bilinear(feature, resolution, resolution)
    c = out.shape[1]
    if c > channels:
        out = nm.channel_slice(out, channels)
    elif c < channels:
        out = nm.channel_pad(out, channels)
    return out


def gather_contributions(
    round_: CollabRound,
    receiver: int,
    feats: Sequence[nm.Grid],
    mode: str,
    pairs: Optional[Dict[int, object]] = None,
    through_messages: bool = True,
) -> Tuple[List[nm.Grid], int]:
    """Ego feature plus aligned neighbor features, ego first.

    ``through_messages`` routes stamp-mode features through the byte format
    (as deployment would); turn it off to keep the autodiff tape intact.
    """
    spec = round_.specs[receiver]
    ego_feature = feats[receiver]
    contributions = [ego_feature]  # the ego feature is used as-is, untouched
    if mode == "non_collab":
        return contributions, 0
    receiver_pose = round_.true_poses[receiver]
    received = 0
    for j in round_.neighbors(receiver):
        sender_spec = round_.specs[j]
        feature = feats[j]
        reported = round_.reported_poses[j]
        if mode == "stamp":
            if pairs is None or pairs.get(sender_spec.agent_id) is None:
                raise ConfigurationError(
                    f"stamp mode needs an adapter/reverter pair for agent {sender_spec.agent_id}"
                )
            if pairs.get(spec.agent_id) is None:
                raise ConfigurationError(
                    f"stamp mode needs an adapter/reverter pair for agent {spec.agent_id}"
                )
            shared = pairs[sender_spec.agent_id].adapt(feature)
            if through_messages:
                msg = deserialize_message(
                    serialize_message(message_from_feature(sender_spec.agent_id, shared, reported))
                )
                shared = feature_from_message(msg)
                reported = msg.pose
            local = pairs[spec.agent_id].revert(shared)
        elif mode == "collab_no_cfa":
            local = _plain_bridge(feature, spec.channels, spec.feature_resolution)
        else:
            raise ConfigurationError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
        rel = relative_pose(reported, receiver_pose)
        contributions.append(
            warp_feature(local, rel, spec.feature_resolution, spec.view_radius)
        )
        received += 1
    return contributions, received


def run_round(
    round_: CollabRound,
    models: Sequence[AgentModel],
    pairs: Optional[Dict[int, object]] = None,
    mode: str = "stamp",
    world_config: WorldConfig = WorldConfig(),
) -> Dict[int, AgentRoundResult]:
    """Evaluate one collaboration round for every agent.

    Pure in (round, weights): no randomness is drawn here, so identical
    inputs give identical outputs byte for byte.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if len(models) != len(round_.specs):
        raise ConfigurationError(f"round has {len(round_.specs)} agents but {len(models)} models")
    for model, spec in zip(models, round_.specs):
        if model.spec != spec:
            raise ConfigurationError(
                f"model for agent {model.spec.agent_id} does not match the round spec"
            )
    results: Dict[int, AgentRoundResult] = {}
    with nm.no_grad():
        feats = [
            model.encode(render_frame(round_.world, pose, model.spec.modality, world_config).grid)
            for model, pose in zip(models, round_.true_poses)
        ]
        for i, model in enumerate(models):
            spec = model.spec
            gt = make_ground_truth(round_.world, round_.true_poses[i], spec.task, world_config)
            if mode == "late_fusion":
                results[spec.agent_id] = _late_fusion_result(round_, models, feats, i, gt)
                continue
            contribs, received = gather_contributions(round_, i, feats, mode, pairs)
            output = model.decode(model.fuse(contribs, ego_index=0))
            boxes = decode_boxes(output, spec) if spec.task == "detection" else None
            results[spec.agent_id] = AgentRoundResult(
                agent_id=spec.agent_id,
                task=spec.task,
                output=output,
                ground_truth=gt,
                boxes=boxes,
                n_received=received,
            )
    return results


def _late_fusion_result(
    round_: CollabRound,
    models: Sequence[AgentModel],
    feats: Sequence[nm.Grid],
    receiver: int,
    gt: GroundTruth,
) -> AgentRoundResult:
    """Merge decoded outputs instead of features.

    Only same-task detection neighbors can contribute (their boxes transform
    into the receiver frame); segmentation has no cross-agent merge here, so
    those agents fall back to their own output.
    """
    spec = round_.specs[receiver]
    model = models[receiver]
    own = model.decode(model.fuse([feats[receiver]], ego_index=0))
    if spec.task != "detection":
        return AgentRoundResult(
            agent_id=spec.agent_id, task=spec.task, output=own, ground_truth=gt, boxes=None
        )
    merged = list(decode_boxes(own, spec))
    received = 0
    for j in round_.neighbors(receiver):
        if round_.specs[j].task != "detection":
            continue
        theirs = decode_boxes(models[j].decode(models[j].fuse([feats[j]], ego_index=0)), round_.specs[j])
        for box in theirs:
            merged.append(transform_box(box, round_.reported_poses[j], round_.true_poses[receiver]))
        received += 1
    merged = nms(merged, 0.5)
    return AgentRoundResult(
        agent_id=spec.agent_id,
        task=spec.task,
        output=own,
        ground_truth=gt,
        boxes=merged,
        n_received=received,
    )
