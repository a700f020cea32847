"""Feature-domain alignment: protocol model, adapter/reverter pairs, training.

The collaboration substrate is a *protocol* feature domain: one shared BEV
shape that every agent translates into and out of.  Per agent we train a tiny
adapter (local feature -> protocol domain) and reverter (protocol -> local)
while both the agent model and the protocol model stay frozen.  Alignment is
supervised two ways at once:

* feature space — L2 distance between translated features and the domain's
  native feature on the same scene;
* decision space — the frozen downstream head must still produce a good
  output when fed the translated feature.

Adding an agent to an existing fleet therefore costs one pair, not a joint
retrain of everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numeric as nm
from .errors import (
    ConfigurationError,
    DimensionError,
    GenerationError,
    PreconditionError,
    TrainingError,
)
from .models import AgentModel, AgentSpec, kaiming_uniform, task_loss
from .pipeline import relative_pose, warp_feature
from .seeding import derive_rng
from .world import (
    GroundTruth,
    Pose,
    WorldConfig,
    WorldState,
    generate_world,
    make_ground_truth,
    render_frame,
    sample_agent_poses,
)

BLOCK_KINDS = ("convnext_style", "conv1x1", "self_attention")

# lr decay points as fractions of the local/protocol step budget
LOCAL_DECAY_AT = (0.5, 5.0 / 6.0)

PROTOCOL_AGENT_ID = 0


# ---------------------------------------------------------------------------
# specs and configuration


@dataclass(frozen=True)
class ProtocolSpec:
    """Shape and model family of the shared feature domain.

    The protocol model broadcasts its features as-is (identity compressor),
    so its feature shape *is* the on-the-wire message shape.
    """

    modality: str = "lidar_like"
    task: str = "detection"
    width: int = 24
    height: int = 24
    channels: int = 16
    depth: int = 3
    fusion: str = "max_gate"
    encoder_width: int = 64
    head_width: int = 32
    sensor_raster: int = 48
    out_raster: int = 48
    view_radius: float = 24.0

    def validate(self) -> "ProtocolSpec":
        if self.width != self.height:
            raise ConfigurationError(
                f"protocol feature must be square, got {self.width}x{self.height}"
            )
        self.agent_spec().validate()
        return self

    def agent_spec(self) -> AgentSpec:
        return AgentSpec(
            agent_id=PROTOCOL_AGENT_ID,
            modality=self.modality,
            task=self.task,
            channels=self.channels,
            feature_resolution=self.width,
            depth=self.depth,
            fusion=self.fusion,
            encoder_width=self.encoder_width,
            head_width=self.head_width,
            sensor_raster=self.sensor_raster,
            out_raster=self.out_raster,
            view_radius=self.view_radius,
        )


@dataclass(frozen=True)
class CfaTrainConfig:
    """Loss weights and step budgets for the three training stages."""

    lambda_f_adapt: float = 0.5
    lambda_f_revert: float = 0.5
    lambda_d_adapt: float = 0.5
    lambda_d_revert: float = 0.5
    epochs_local: int = 30
    epochs_cfa: int = 5
    scenes_per_epoch: int = 100
    cfa_scenes_per_epoch: int = 400
    batch_k: int = 4
    lr_local: float = 1e-3
    lr_cfa: float = 1e-2
    c_hidden: int = 16
    n_blocks: int = 3
    block_kind: str = "convnext_style"
    seed: int = 0

    def validate(self) -> "CfaTrainConfig":
        lambdas = (
            self.lambda_f_adapt,
            self.lambda_f_revert,
            self.lambda_d_adapt,
            self.lambda_d_revert,
        )
        if any(not math.isfinite(l) or l < 0 for l in lambdas):
            raise ConfigurationError(f"loss weights must be finite and >= 0, got {lambdas}")
        if not any(l > 0 for l in lambdas):
            raise ConfigurationError("at least one loss weight must be positive")
        for name in (
            "epochs_local",
            "epochs_cfa",
            "scenes_per_epoch",
            "cfa_scenes_per_epoch",
            "batch_k",
            "c_hidden",
            "n_blocks",
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr_local <= 0 or self.lr_cfa <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigurationError(
                f"unknown block kind {self.block_kind!r}; expected one of {BLOCK_KINDS}"
            )
        return self

    def with_loss_combo(self, combo: str) -> "CfaTrainConfig":
        """f_only / d_only / both, keeping the active weights at their values."""
        if combo == "both":
            return self
        if combo == "f_only":
            return replace(self, lambda_d_adapt=0.0, lambda_d_revert=0.0)
        if combo == "d_only":
            return replace(self, lambda_f_adapt=0.0, lambda_f_revert=0.0)
        raise ConfigurationError(f"unknown loss combo {combo!r}; expected f_only, d_only or both")


# ---------------------------------------------------------------------------
# adapter / reverter pair


class AdapterReverterPair:
    """Per-agent translators between the local and protocol feature domains.

    Both directions share one layout: bilinear resize to the target
    resolution, a 1x1 conv onto a small hidden width, ``n_blocks`` residual
    blocks, and a 1x1 conv onto the target channel count.  Every block ends
    in a zero-initialized projection, so a fresh pair computes exactly
    resize + (linear 1x1 composition) — a gentle starting point that training
    bends toward the protocol domain.
    """

    def __init__(
        self,
        agent_spec: AgentSpec,
        protocol_spec: ProtocolSpec,
        c_hidden: int = 16,
        n_blocks: int = 3,
        block_kind: str = "convnext_style",
        seed: int = 0,
    ):
        if block_kind not in BLOCK_KINDS:
            raise ConfigurationError(
                f"unknown block kind {block_kind!r}; expected one of {BLOCK_KINDS}"
            )
        if c_hidden < 1 or n_blocks < 1:
            raise ConfigurationError(f"need c_hidden >= 1 and n_blocks >= 1, got {c_hidden}/{n_blocks}")
        self.agent_spec = agent_spec.validate()
        self.protocol_spec = protocol_spec.validate()
        self.c_hidden = c_hidden
        self.n_blocks = n_blocks
        self.block_kind = block_kind
        self.params = nm.ParamStore()
        rng = derive_rng(seed, "pair", agent_spec.agent_id)
        self._build_side(rng, "adapt", agent_spec.channels, protocol_spec.channels)
        self._build_side(rng, "revert", protocol_spec.channels, agent_spec.channels)

    # -- construction -------------------------------------------------------

    def _build_side(self, rng, side: str, c_in: int, c_out: int) -> None:
        p = self.params
        c = self.c_hidden
        p.add(f"{side}.pre.w", kaiming_uniform(rng, (c, c_in, 1, 1), c_in))
        p.add(f"{side}.pre.b", np.zeros(c, dtype=np.float32))
        for b in range(self.n_blocks):
            name = f"{side}.blk{b}"
            if self.block_kind == "convnext_style":
                p.add(f"{name}.dw.w", kaiming_uniform(rng, (c, 3, 3), 9))
                p.add(f"{name}.dw.b", np.zeros(c, dtype=np.float32))
                p.add(f"{name}.ln.g", np.ones((1, c, 1, 1), dtype=np.float32))
                p.add(f"{name}.ln.b", np.zeros((1, c, 1, 1), dtype=np.float32))
                p.add(f"{name}.pw1.w", kaiming_uniform(rng, (2 * c, c, 1, 1), c))
                p.add(f"{name}.pw1.b", np.zeros(2 * c, dtype=np.float32))
                p.add(f"{name}.pw2.w", np.zeros((c, 2 * c, 1, 1), dtype=np.float32))
                p.add(f"{name}.pw2.b", np.zeros(c, dtype=np.float32))
            elif self.block_kind == "conv1x1":
                p.add(f"{name}.w", np.zeros((c, c, 1, 1), dtype=np.float32))
                p.add(f"{name}.b", np.zeros(c, dtype=np.float32))
            else:  # self_attention
                for head in ("q", "k", "v"):
                    p.add(f"{name}.{head}.w", kaiming_uniform(rng, (c, c, 1, 1), c))
                    p.add(f"{name}.{head}.b", np.zeros(c, dtype=np.float32))
                p.add(f"{name}.out.w", np.zeros((c, c, 1, 1), dtype=np.float32))
                p.add(f"{name}.out.b", np.zeros(c, dtype=np.float32))
        p.add(f"{side}.post.w", kaiming_uniform(rng, (c_out, c, 1, 1), c))
        p.add(f"{side}.post.b", np.zeros(c_out, dtype=np.float32))

    def init_identity(self) -> "AdapterReverterPair":
        """Make both directions exact identities (blocks are already no-ops).

        Requires every channel count involved to equal c_hidden; useful for
        wiring tests where the pair must be transparent.
        """
        c_i = self.agent_spec.channels
        c_p = self.protocol_spec.channels
        if not (c_i == c_p == self.c_hidden):
            raise ConfigurationError(
                f"identity pair needs equal channels, got local {c_i}, protocol {c_p}, "
                f"hidden {self.c_hidden}"
            )
        eye = np.eye(self.c_hidden, dtype=np.float32)[:, :, None, None]
        for side in ("adapt", "revert"):
            for stage in ("pre", "post"):
                self.params[f"{side}.{stage}.w"].values[...] = eye
                self.params[f"{side}.{stage}.b"].values[...] = 0.0
        return self

    # -- forward ------------------------------------------------------------

    def _run_side(self, side: str, x: nm.Grid, out_res: int, resize_first: bool) -> nm.Grid:
        """Adapt resizes first, revert mirrors it (resize last).

        Either way the conv stack runs at the protocol resolution.
        """
        if resize_first:
            x = nm.resize_bilinear(x, out_res, out_res)
        x = nm.conv2d(x, self.params[f"{side}.pre.w"], self.params[f"{side}.pre.b"])
        for b in range(self.n_blocks):
            x = self._block(f"{side}.blk{b}", x)
        x = nm.conv2d(x, self.params[f"{side}.post.w"], self.params[f"{side}.post.b"])
        if not resize_first:
            x = nm.resize_bilinear(x, out_res, out_res)
        return x

    def _block(self, name: str, x: nm.Grid) -> nm.Grid:
        p = self.params
        if self.block_kind == "convnext_style":
            h = nm.depthwise_conv2d(x, p[f"{name}.dw.w"], p[f"{name}.dw.b"], padding=1)
            h = nm.layer_norm(h)
            h = nm.add(nm.mul(h, p[f"{name}.ln.g"]), p[f"{name}.ln.b"])
            h = nm.conv2d(h, p[f"{name}.pw1.w"], p[f"{name}.pw1.b"])
            h = nm.gelu(h)
            h = nm.conv2d(h, p[f"{name}.pw2.w"], p[f"{name}.pw2.b"])
            return nm.add(x, h)
        if self.block_kind == "conv1x1":
            return nm.add(x, nm.conv2d(x, p[f"{name}.w"], p[f"{name}.b"]))
        # self_attention: per-position tokens over the full spatial extent
        b, c, hh, ww = x.shape
        q = nm.conv2d(x, p[f"{name}.q.w"], p[f"{name}.q.b"])
        k = nm.conv2d(x, p[f"{name}.k.w"], p[f"{name}.k.b"])
        v = nm.conv2d(x, p[f"{name}.v.w"], p[f"{name}.v.b"])
        flip = (0, 2, 1)
        qt = nm.transpose(nm.reshape(q, (b, c, hh * ww)), flip)  # (B, HW, C)
        kf = nm.reshape(k, (b, c, hh * ww))
        attn = nm.softmax(nm.scale(nm.matmul(qt, kf), 1.0 / math.sqrt(c)), axis=-1)
        vt = nm.transpose(nm.reshape(v, (b, c, hh * ww)), flip)
        mixed = nm.reshape(nm.transpose(nm.matmul(attn, vt), flip), (b, c, hh, ww))
        out = nm.conv2d(mixed, p[f"{name}.out.w"], p[f"{name}.out.b"])
        return nm.add(x, out)

    def adapt(self, feature: nm.Grid) -> nm.Grid:
        """Local feature -> protocol domain."""
        s = self.agent_spec
        expected = (s.channels, s.feature_resolution, s.feature_resolution)
        if feature.values.ndim != 4 or feature.shape[1:] != expected:
            raise DimensionError(
                f"adapt expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {feature.shape}"
            )
        return self._run_side("adapt", feature, self.protocol_spec.width, resize_first=True)

    def revert(self, feature: nm.Grid) -> nm.Grid:
        """Protocol-domain feature -> local domain."""
        ps = self.protocol_spec
        expected = (ps.channels, ps.height, ps.width)
        if feature.values.ndim != 4 or feature.shape[1:] != expected:
            raise DimensionError(
                f"revert expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {feature.shape}"
            )
        return self._run_side(
            "revert", feature, self.agent_spec.feature_resolution, resize_first=False
        )

    @property
    def param_count(self) -> int:
        return self.params.total_params()


def pair_parameter_report(pair: AdapterReverterPair, model: AgentModel) -> Dict[str, float]:
    """Pair size next to the encoder it piggybacks on."""
    encoder = sum(g.values.size for n, g in model.params.items() if n.startswith("encoder."))
    pair_n = pair.param_count
    return {
        "pair_params": float(pair_n),
        "encoder_params": float(encoder),
        "ratio": pair_n / encoder if encoder else float("inf"),
    }


# ---------------------------------------------------------------------------
# losses


@dataclass
class CfaSample:
    """One scene's feature quintet used by both alignment losses.

    f_local / f_protocol are encoder outputs (constants here); the other
    three are the pair's translations of them and carry the tape.
    """

    f_local: nm.Grid
    f_protocol: nm.Grid
    f_adapted: nm.Grid  # adapt(f_local), protocol domain
    f_reverted: nm.Grid  # revert(f_protocol), local domain
    f_cycled: nm.Grid  # revert(adapt(f_local)), local domain


def make_samples(
    pair: AdapterReverterPair, locals_: Sequence[nm.Grid], protocols: Sequence[nm.Grid]
) -> List[CfaSample]:
    if len(locals_) != len(protocols):
        raise PreconditionError(
            f"need matching feature lists, got {len(locals_)} local vs {len(protocols)} protocol"
        )
    samples = []
    for f_i, f_p in zip(locals_, protocols):
        f_ip = pair.adapt(f_i)
        samples.append(
            CfaSample(
                f_local=f_i,
                f_protocol=f_p,
                f_adapted=f_ip,
                f_reverted=pair.revert(f_p),
                f_cycled=pair.revert(f_ip),
            )
        )
    return samples


def _l2_distance(a: nm.Grid, b: nm.Grid) -> nm.Grid:
    diff = nm.sub(a, b)
    return nm.sqrt(nm.sum_all(nm.mul(diff, diff)))


def loss_feature(pair: AdapterReverterPair, batch: Sequence[CfaSample]) -> Tuple[nm.Grid, nm.Grid]:
    """Feature-space alignment: mean L2 distances over the batch.

    Adapt side compares adapted vs native protocol features; revert side
    adds the reverted-protocol and round-trip distances to the local feature.
    """
    if not batch:
        raise PreconditionError("loss_feature needs at least one sample")
    k = len(batch)
    adapt_total: Optional[nm.Grid] = None
    revert_total: Optional[nm.Grid] = None
    for s in batch:
        a = _l2_distance(s.f_adapted, s.f_protocol)
        r = nm.add(_l2_distance(s.f_reverted, s.f_local), _l2_distance(s.f_cycled, s.f_local))
        adapt_total = a if adapt_total is None else nm.add(adapt_total, a)
        revert_total = r if revert_total is None else nm.add(revert_total, r)
    return nm.scale(adapt_total, 1.0 / k), nm.scale(revert_total, 1.0 / k)


def _check_gt(gt: GroundTruth, task: str, who: str) -> GroundTruth:
    if gt.task != task:
        raise ConfigurationError(f"{who} ground truth is for task {gt.task!r}, model needs {task!r}")
    if task == "detection" and gt.boxes is None:
        raise ConfigurationError(f"{who} ground truth is missing boxes for the detection loss")
    if task in ("static_seg", "dynamic_seg") and gt.mask is None:
        raise ConfigurationError(f"{who} ground truth is missing a mask for the segmentation loss")
    return gt


def _singleton_decision(model: AgentModel, feature: nm.Grid, gt: GroundTruth) -> nm.Grid:
    """Frozen fuse+decode applied to one feature, scored by the task loss."""
    return task_loss(model.decode(model.fuse([feature], ego_index=0)), gt, model.spec)


def loss_decision(
    pair: AdapterReverterPair,
    protocol_model: AgentModel,
    local_model: AgentModel,
    batch: Sequence[CfaSample],
    gt_protocol: Sequence[GroundTruth],
    gt_local: Sequence[GroundTruth],
) -> Tuple[nm.Grid, nm.Grid]:
    """Decision-space alignment through the frozen downstream heads.

    Adapt side: the protocol model's head must solve its task from the
    adapted feature.  Revert side: the local head must solve its task from
    both the reverted protocol feature and the round-trip feature.
    """
    if not batch:
        raise PreconditionError("loss_decision needs at least one sample")
    if not len(batch) == len(gt_protocol) == len(gt_local):
        raise PreconditionError(
            f"batch/gt length mismatch: {len(batch)} samples, "
            f"{len(gt_protocol)} protocol GT, {len(gt_local)} local GT"
        )
    k = len(batch)
    adapt_total: Optional[nm.Grid] = None
    revert_total: Optional[nm.Grid] = None
    for s, gt_p, gt_i in zip(batch, gt_protocol, gt_local):
        _check_gt(gt_p, protocol_model.spec.task, "protocol")
        _check_gt(gt_i, local_model.spec.task, "local")
        a = _singleton_decision(protocol_model, s.f_adapted, gt_p)
        r = nm.add(
            _singleton_decision(local_model, s.f_reverted, gt_i),
            _singleton_decision(local_model, s.f_cycled, gt_i),
        )
        adapt_total = a if adapt_total is None else nm.add(adapt_total, a)
        revert_total = r if revert_total is None else nm.add(revert_total, r)
    return nm.scale(adapt_total, 1.0 / k), nm.scale(revert_total, 1.0 / k)


def total_loss(
    cfg: CfaTrainConfig,
    l_f_adapt: nm.Grid,
    l_f_revert: nm.Grid,
    l_d_adapt: nm.Grid,
    l_d_revert: nm.Grid,
) -> nm.Grid:
    """Weighted sum, accumulated strictly left to right."""
    out = nm.scale(l_f_adapt, cfg.lambda_f_adapt)
    out = nm.add(out, nm.scale(l_f_revert, cfg.lambda_f_revert))
    out = nm.add(out, nm.scale(l_d_adapt, cfg.lambda_d_adapt))
    out = nm.add(out, nm.scale(l_d_revert, cfg.lambda_d_revert))
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TrainScene:
    world: WorldState
    poses: Tuple[Pose, ...]
    # carried with the scene so rendering at train time can never use a
    # different geometry than the one the world was built with
    world_config: WorldConfig = WorldConfig()


def make_dataset(
    n_scenes: int,
    n_agents: int,
    seed: int,
    tag: str = "train",
    world_config: WorldConfig = WorldConfig(),
) -> List[TrainScene]:
    """Procedural scenes with agent poses on the road network.

    Different tags partition the scene space: world seeds are derived from
    (seed, tag, index), so train/eval sets never share a world.
    """
    scenes = []
    for index in range(n_scenes):
        rng = derive_rng(seed, "dataset", tag, index)
        # a crowded layout can make pose placement infeasible; redraw the
        # world from the same stream so one bad seed cannot kill the set
        for attempt in range(32):
            world = generate_world(int(rng.integers(0, 2**63 - 1)), world_config)
            try:
                poses = sample_agent_poses(world, n_agents, rng, world_config)
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(
                f"no placeable world for scene {index} of {tag!r} after 32 draws"
            )
        scenes.append(
            TrainScene(world=world, poses=tuple(poses), world_config=world_config)
        )
    return scenes


# ---------------------------------------------------------------------------
# training stages


def _local_lr(cfg: CfaTrainConfig, step: int, total: int) -> float:
    lr = cfg.lr_local
    if step >= int(total * LOCAL_DECAY_AT[0]):
        lr *= 0.1
    if step >= int(total * LOCAL_DECAY_AT[1]):
        lr *= 0.1
    return lr


def _train_fused(model: AgentModel, dataset: Sequence[TrainScene], cfg: CfaTrainConfig, tag: str):
    """Shared loop for protocol/local training: self-collaborative fusion.

    Every step renders the model's own modality at the rotating ego pose
    plus a random subset of the other scene poses, warps the non-ego
    features into the ego frame (true poses, no noise) and optimizes the
    task loss of the fused decode.  Varying the fan-in from a lone view up
    to the full roster teaches the decoder every regime it will face at
    deployment, including running without any collaborators; the draw is
    skewed toward higher fan-in so the decoder leans on collaborators for
    occluded content instead of treating the extra views as optional.
    """
    if not dataset:
        raise PreconditionError("training needs at least one scene")
    cfg.validate()
    spec = model.spec
    total = cfg.epochs_local * cfg.scenes_per_epoch
    rng = derive_rng(cfg.seed, "fan_in", tag)
    losses: List[float] = []
    for step in range(total):
        scene = dataset[step % len(dataset)]
        wc = scene.world_config
        ego = step % len(scene.poses)
        ego_pose = scene.poses[ego]
        others = [i for i in range(len(scene.poses)) if i != ego]
        fan = np.arange(1, len(others) + 2, dtype=np.float64) ** 2
        m = int(rng.choice(len(others) + 1, p=fan / fan.sum()))
        keep = [others[j] for j in sorted(rng.permutation(len(others))[:m])]
        feats = [model.encode(render_frame(scene.world, ego_pose, spec.modality, wc).grid)]
        for i in keep:
            pose = scene.poses[i]
            feat = model.encode(render_frame(scene.world, pose, spec.modality, wc).grid)
            feats.append(
                warp_feature(
                    feat,
                    relative_pose(pose, ego_pose),
                    spec.feature_resolution,
                    spec.view_radius,
                )
            )
        gt = make_ground_truth(scene.world, ego_pose, spec.task, wc)
        loss = task_loss(model.decode(model.fuse(feats, ego_index=0)), gt, spec)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"{tag} loss became non-finite at step {step}")
        losses.append(value)
        model.params.zero_grads()
        loss.backward()
        nm.adam_step(model.params, model.params.gather_grads(), _local_lr(cfg, step, total))
    return losses


def train_protocol(
    spec: ProtocolSpec, dataset: Sequence[TrainScene], cfg: CfaTrainConfig
) -> Tuple[AgentModel, List[float]]:
    """Stage one: the shared-domain model, trained like any collaborator."""
    model = AgentModel(spec.validate().agent_spec(), seed=cfg.seed)
    losses = _train_fused(model, dataset, cfg, "protocol")
    return model, losses


def train_agent_local(
    spec: AgentSpec, dataset: Sequence[TrainScene], cfg: CfaTrainConfig
) -> Tuple[AgentModel, List[float]]:
    """Stage two: an agent's own model, trained with self-collaboration."""
    model = AgentModel(spec.validate(), seed=cfg.seed)
    losses = _train_fused(model, dataset, cfg, f"agent {spec.agent_id}")
    return model, losses


def train_cfa_pair(
    agent_model: AgentModel,
    protocol_model: AgentModel,
    dataset: Sequence[TrainScene],
    cfg: CfaTrainConfig,
    pair: Optional[AdapterReverterPair] = None,
    protocol_spec: Optional[ProtocolSpec] = None,
) -> Tuple[AdapterReverterPair, List[float]]:
    """Stage three: fit one agent's pair against the frozen models.

    Batches draw K scenes; both encoders run without the tape (their
    parameters are frozen and never receive gradients), and only the pair's
    parameters are stepped.
    """
    if not dataset:
        raise PreconditionError("training needs at least one scene")
    cfg.validate()
    if protocol_spec is None:
        ps = protocol_model.spec
        protocol_spec = ProtocolSpec(
            modality=ps.modality,
            task=ps.task,
            width=ps.feature_resolution,
            height=ps.feature_resolution,
            channels=ps.channels,
            depth=ps.depth,
            fusion=ps.fusion,
            encoder_width=ps.encoder_width,
            head_width=ps.head_width,
            sensor_raster=ps.sensor_raster,
            out_raster=ps.out_raster,
            view_radius=ps.view_radius,
        )
    if pair is None:
        pair = AdapterReverterPair(
            agent_model.spec,
            protocol_spec,
            c_hidden=cfg.c_hidden,
            n_blocks=cfg.n_blocks,
            block_kind=cfg.block_kind,
            seed=cfg.seed,
        )
    spec = agent_model.spec
    steps_per_epoch = max(1, -(-cfg.cfa_scenes_per_epoch // cfg.batch_k))
    total = cfg.epochs_cfa * steps_per_epoch
    rng = derive_rng(cfg.seed, "cfa", spec.agent_id)
    losses: List[float] = []
    # both models are frozen for the whole loop, so their features for a
    # given (scene, pose) never change; memoize instead of re-encoding
    feat_memo: Dict[Tuple[int, int], Tuple[nm.Grid, nm.Grid]] = {}
    agent_model.params.freeze()
    protocol_model.params.freeze()
    try:
        for step in range(total):
            lr = cfg.lr_cfa * (0.1 if step >= steps_per_epoch else 1.0)
            locals_: List[nm.Grid] = []
            protocols: List[nm.Grid] = []
            gt_local: List[GroundTruth] = []
            gt_protocol: List[GroundTruth] = []
            for _ in range(cfg.batch_k):
                s_idx = int(rng.integers(0, len(dataset)))
                scene = dataset[s_idx]
                p_idx = int(rng.integers(0, len(scene.poses)))
                pose = scene.poses[p_idx]
                wc = scene.world_config
                cached = feat_memo.get((s_idx, p_idx))
                if cached is None:
                    with nm.no_grad():
                        cached = (
                            agent_model.encode(
                                render_frame(scene.world, pose, spec.modality, wc).grid
                            ),
                            protocol_model.encode(
                                render_frame(
                                    scene.world, pose, protocol_model.spec.modality, wc
                                ).grid
                            ),
                        )
                    feat_memo[(s_idx, p_idx)] = cached
                locals_.append(cached[0])
                protocols.append(cached[1])
                gt_local.append(make_ground_truth(scene.world, pose, spec.task, wc))
                gt_protocol.append(
                    make_ground_truth(scene.world, pose, protocol_model.spec.task, wc)
                )
            batch = make_samples(pair, locals_, protocols)
            l_f_adapt, l_f_revert = loss_feature(pair, batch)
            l_d_adapt, l_d_revert = loss_decision(
                pair, protocol_model, agent_model, batch, gt_protocol, gt_local
            )
            loss = total_loss(cfg, l_f_adapt, l_f_revert, l_d_adapt, l_d_revert)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"pair loss became non-finite at step {step}")
            losses.append(value)
            pair.params.zero_grads()
            loss.backward()
            nm.adam_step(pair.params, pair.params.gather_grads(), lr)
    finally:
        agent_model.params.unfreeze()
        protocol_model.params.unfreeze()
    return pair, losses
