"""Synthetic bird's-eye-view worlds and the two sensor renderers.

A world is a square patch of ground `extent` meters across: a binary
static layout raster (roads) plus a handful of axis-aligned dynamic
objects with cardinal heading codes.  Agents observe it through ego
rasters covering a disc of `visibility_radius` meters:

  lidar_like  : 2 channels, ray-cast occluded occupancy + height proxy
  camera_like : 3 channels, per-class colors, blur growing with range

Ground truth always comes from the true world content (range-gated but
not occlusion-gated), which is exactly why collaboration has headroom:
an agent is scored on objects hidden from its own sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, GenerationError, PreconditionError, ProtocolError
from .models import Box
from .numeric import Grid
from .seeding import derive_rng

SCENE_FORMAT_VERSION = 1

ROAD_COLOR = (0.30, 0.34, 0.42)
VEHICLE_COLOR = (0.85, 0.30, 0.22)
HEIGHT_DYNAMIC = 1.0
HEIGHT_STATIC = 0.4

TASKS = ("detection", "static_seg", "dynamic_seg")
MODALITIES = ("lidar_like", "camera_like")


@dataclass(frozen=True)
class WorldConfig:
    extent: float = 48.0
    layout_raster: int = 96
    sensor_raster: int = 48
    out_raster: int = 48
    visibility_radius: float = 24.0
    n_objects: int = 16
    object_length: Tuple[float, float] = (3.5, 5.0)
    object_width: Tuple[float, float] = (1.8, 2.4)
    road_bias: float = 0.75
    camera_max_blur: float = 2.5
    camera_noise_std: float = 0.0
    render_seed: int = 0
    max_place_tries: int = 300

    def validate(self) -> "WorldConfig":
        if self.extent <= 0:
            raise ConfigurationError("world.extent must be positive")
        if self.layout_raster < 4 or self.sensor_raster < 4 or self.out_raster < 4:
            raise ConfigurationError("world rasters must be at least 4 cells")
        if not 0 < self.visibility_radius <= self.extent / 2 + 1e-9:
            raise ConfigurationError(
                f"world.visibility_radius must lie in (0, extent/2], got {self.visibility_radius}"
            )
        if self.n_objects < 0:
            raise ConfigurationError("world.n_objects must be non-negative")
        if self.camera_max_blur < 0:
            raise ConfigurationError("world.camera_max_blur must be non-negative")
        return self


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float = 0.0


@dataclass(frozen=True)
class WorldObject:
    """Axis-aligned box in world meters; heading is a cardinal code 0..3."""

    center_x: float
    center_y: float
    width: float
    height: float
    heading: int


@dataclass
class WorldState:
    scene_id: int
    extent: float
    layout: np.ndarray  # (layout_raster, layout_raster) bool
    objects: List[WorldObject]


@dataclass
class SensorFrame:
    modality: str
    grid: Grid  # (1, C, S, S)


@dataclass
class GroundTruth:
    task: str
    boxes: Optional[List[Box]] = None  # detection, ego-frame meters
    mask: Optional[np.ndarray] = None  # segmentation, (out_raster, out_raster) bool


# ---------------------------------------------------------------------------
# world generation


def _road_templates(rng: np.random.Generator, n: int) -> np.ndarray:
    """Procedural road layouts on an n x n bool raster."""
    layout = np.zeros((n, n), dtype=bool)
    half_w = int(rng.integers(4, 8))  # 2-4 m at 0.5 m cells
    kind = int(rng.integers(0, 5))
    c1 = int(rng.integers(n // 4, 3 * n // 4))
    c2 = int(rng.integers(n // 4, 3 * n // 4))
    if kind == 0:  # horizontal band
        layout[max(0, c1 - half_w) : c1 + half_w, :] = True
    elif kind == 1:  # vertical band
        layout[:, max(0, c1 - half_w) : c1 + half_w] = True
    elif kind == 2:  # crossing
        layout[max(0, c1 - half_w) : c1 + half_w, :] = True
        layout[:, max(0, c2 - half_w) : c2 + half_w] = True
    elif kind == 3:  # two parallel horizontal roads
        other = (c1 + n // 2) % n
        layout[max(0, c1 - half_w) : c1 + half_w, :] = True
        layout[max(0, other - half_w) : other + half_w, :] = True
    else:  # L junction
        layout[max(0, c1 - half_w) : c1 + half_w, : c2 + half_w] = True
        layout[c1 - half_w :, max(0, c2 - half_w) : c2 + half_w] = True
    return layout


def _object_extents(length: float, width: float, heading: int) -> Tuple[float, float]:
    # even headings run along x, odd along y
    return (length, width) if heading % 2 == 0 else (width, length)


def _boxes_overlap(a: WorldObject, b: WorldObject) -> bool:
    return (
        abs(a.center_x - b.center_x) < (a.width + b.width) / 2
        and abs(a.center_y - b.center_y) < (a.height + b.height) / 2
    )


def generate_world(seed: int, config: WorldConfig = WorldConfig()) -> WorldState:
    """Deterministic world from a seed: layout template + non-overlapping objects."""
    config.validate()
    rng = derive_rng(seed, "world")
    layout = _road_templates(rng, config.layout_raster)
    half = config.extent / 2
    cell = config.extent / config.layout_raster
    road_rows, road_cols = np.nonzero(layout)

    objects: List[WorldObject] = []
    tries = 0
    budget = config.max_place_tries * max(1, config.n_objects)
    while len(objects) < config.n_objects:
        if tries >= budget:
            raise GenerationError(
                f"could not place {config.n_objects} non-overlapping objects "
                f"within {budget} tries (scene seed {seed})"
            )
        tries += 1
        heading = int(rng.integers(0, 4))
        length = float(rng.uniform(*config.object_length))
        width = float(rng.uniform(*config.object_width))
        w, h = _object_extents(length, width, heading)
        if road_rows.size > 0 and rng.uniform() < config.road_bias:
            k = int(rng.integers(0, road_rows.size))
            cx = (road_cols[k] + 0.5) * cell - half + float(rng.uniform(-1.0, 1.0))
            cy = (road_rows[k] + 0.5) * cell - half + float(rng.uniform(-1.0, 1.0))
        else:
            cx = float(rng.uniform(-half + w / 2, half - w / 2))
            cy = float(rng.uniform(-half + h / 2, half - h / 2))
        cand = WorldObject(float(cx), float(cy), float(w), float(h), heading)
        if abs(cx) + w / 2 > half or abs(cy) + h / 2 > half:
            continue
        if any(_boxes_overlap(cand, o) for o in objects):
            continue
        objects.append(cand)

    return WorldState(scene_id=seed, extent=config.extent, layout=layout, objects=objects)


def sample_agent_poses(
    world: WorldState,
    n: int,
    rng: np.random.Generator,
    config: WorldConfig = WorldConfig(),
    min_gap: float = 6.0,
    max_gap: float = 22.0,
) -> List[Pose]:
    """Place n agents on road cells, pairwise gaps in [min_gap, max_gap], yaw 0."""
    rows, cols = np.nonzero(world.layout)
    if rows.size == 0:
        raise GenerationError(f"scene {world.scene_id} has no road cells to place agents on")
    cell = world.extent / world.layout.shape[0]
    half = world.extent / 2
    poses: List[Pose] = []
    tries = 0
    while len(poses) < n:
        if tries > 400 * n:
            raise GenerationError(
                f"could not place {n} agents with gaps in [{min_gap}, {max_gap}] "
                f"on scene {world.scene_id}"
            )
        tries += 1
        k = int(rng.integers(0, rows.size))
        x = float((cols[k] + 0.5) * cell - half)
        y = float((rows[k] + 0.5) * cell - half)
        ok = all(
            min_gap <= math.hypot(x - p.x, y - p.y) <= max_gap for p in poses
        )
        if ok:
            poses.append(Pose(x, y, 0.0))
    return poses


def perturb_pose(pose: Pose, sigma: float, rng: np.random.Generator) -> Pose:
    """Gaussian location noise; yaw is reported exactly."""
    if sigma < 0:
        raise PreconditionError(f"pose noise sigma must be non-negative, got {sigma}")
    dx, dy = rng.normal(0.0, 1.0, 2)
    return Pose(pose.x + sigma * float(dx), pose.y + sigma * float(dy), pose.yaw)


# ---------------------------------------------------------------------------
# rasterization and line of sight


def _cardinal_quadrant(yaw: float) -> int:
    q = round(yaw / (math.pi / 2))
    if abs(yaw - q * (math.pi / 2)) > 1e-6:
        raise PreconditionError(
            f"pose yaw {yaw} is not a cardinal angle; axis-aligned rasters require multiples of pi/2"
        )
    return int(q) % 4


def _ego_to_world(pose: Pose, ex: np.ndarray, ey: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    return pose.x + cy * ex - sy * ey, pose.y + sy * ex + cy * ey


def _cell_centers(size: int, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    cell = 2 * radius / size
    coords = (np.arange(size) + 0.5) * cell - radius
    ex, ey = np.meshgrid(coords, coords)  # ex varies along columns, ey along rows
    return ex, ey


def _rasterize(world: WorldState, pose: Pose, size: int, radius: float):
    """Bool rasters (dynamic, road, in_range) on the ego grid via inverse lookup."""
    ex, ey = _cell_centers(size, radius)
    wx, wy = _ego_to_world(pose, ex, ey)
    in_range = ex * ex + ey * ey <= radius * radius

    dynamic = np.zeros((size, size), dtype=bool)
    for o in world.objects:
        dynamic |= (np.abs(wx - o.center_x) <= o.width / 2) & (
            np.abs(wy - o.center_y) <= o.height / 2
        )

    n_layout = world.layout.shape[0]
    cell_layout = world.extent / n_layout
    half = world.extent / 2
    li = np.floor((wy + half) / cell_layout).astype(np.intp)
    lj = np.floor((wx + half) / cell_layout).astype(np.intp)
    inside = (li >= 0) & (li < n_layout) & (lj >= 0) & (lj < n_layout)
    road = np.zeros((size, size), dtype=bool)
    road[inside] = world.layout[li[inside], lj[inside]]
    return dynamic, road, in_range


@lru_cache(maxsize=8)
def _los_paths(size: int) -> np.ndarray:
    """Per-cell line-of-sight paths from the raster center.

    Returns an int matrix (size*size, max_len) of flat cell indices lying
    strictly between the center and each cell, padded with the sentinel
    size*size (a guaranteed-free virtual cell).
    """
    origin = size / 2.0
    sentinel = size * size
    paths: List[List[int]] = []
    for r in range(size):
        for c in range(size):
            tx, ty = c + 0.5, r + 0.5
            dx, dy = tx - origin, ty - origin
            dist = math.hypot(dx, dy)
            cells: List[int] = []
            if dist > 1.0:
                n_steps = int(4 * math.ceil(dist))
                seen = set()
                for s in range(1, n_steps):
                    t = s / n_steps
                    px, py = origin + t * dx, origin + t * dy
                    # skip the immediate neighborhood of the sensor
                    if (px - origin) ** 2 + (py - origin) ** 2 < 1.0:
                        continue
                    ci = int(min(max(math.floor(px), 0), size - 1))
                    ri = int(min(max(math.floor(py), 0), size - 1))
                    if ri == r and ci == c:
                        continue
                    key = ri * size + ci
                    if key not in seen:
                        seen.add(key)
                        cells.append(key)
            paths.append(cells)
    max_len = max(1, max(len(p) for p in paths))
    out = np.full((size * size, max_len), sentinel, dtype=np.intp)
    for i, p in enumerate(paths):
        out[i, : len(p)] = p
    return out


def _visibility(dynamic: np.ndarray) -> np.ndarray:
    """Cells whose line of sight to the center is not blocked by dynamic cells."""
    size = dynamic.shape[0]
    paths = _los_paths(size)
    blocked = np.concatenate([dynamic.reshape(-1), [False]])
    return ~np.any(blocked[paths], axis=1).reshape(size, size)


# ---------------------------------------------------------------------------
# sensors


def _visible_footprints(
    world: WorldState, pose: Pose, size: int, radius: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(object mask, road mask, in_range) after line-of-sight occlusion.

    Objects block sight of each other, but an object whose surface is seen
    at all contributes its whole in-range footprint: a box's extent must be
    present in the evidence or no head could ever regress it back.
    """
    dynamic, road, in_range = _rasterize(world, pose, size, radius)
    visible = _visibility(dynamic) & in_range
    ex, ey = _cell_centers(size, radius)
    wx, wy = _ego_to_world(pose, ex, ey)
    objects = np.zeros((size, size), dtype=bool)
    for o in world.objects:
        m = (np.abs(wx - o.center_x) <= o.width / 2) & (
            np.abs(wy - o.center_y) <= o.height / 2
        )
        if np.any(m & visible):
            objects |= m & in_range
    return objects, road & visible, in_range


def render_lidar_like(
    world: WorldState, pose: Pose, config: WorldConfig = WorldConfig()
) -> SensorFrame:
    """Occupancy + height-proxy raster with ray-cast occlusion."""
    size = config.sensor_raster
    objects, road_vis, _ = _visible_footprints(world, pose, size, config.visibility_radius)
    occ = objects.astype(np.float32)
    height = np.where(
        objects,
        np.float32(HEIGHT_DYNAMIC),
        np.where(road_vis, np.float32(HEIGHT_STATIC), np.float32(0.0)),
    ).astype(np.float32)
    grid = Grid(np.stack([occ, height])[None])
    return SensorFrame(modality="lidar_like", grid=grid)


def blur_sigma_at(range_m: float, config: WorldConfig = WorldConfig()) -> float:
    """Blur schedule: 0 at the sensor, camera_max_blur cells at max range."""
    r = min(max(range_m, 0.0), config.visibility_radius)
    return config.camera_max_blur * r / config.visibility_radius


def _gaussian_blur_2d(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 1e-6:
        return img.copy()
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img.astype(np.float64), radius, mode="edge")
    tmp = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 0, pad)
    out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 1, tmp)
    return out.astype(np.float32)


def camera_color_field(
    world: WorldState, pose: Pose, config: WorldConfig = WorldConfig()
) -> np.ndarray:
    """Pre-blur color raster (3, S, S): class colors under occlusion + range."""
    size = config.sensor_raster
    objects, road_vis, _ = _visible_footprints(world, pose, size, config.visibility_radius)
    field = np.zeros((3, size, size), dtype=np.float32)
    road_only = road_vis & ~objects
    for ch in range(3):
        field[ch][road_only] = ROAD_COLOR[ch]
        field[ch][objects] = VEHICLE_COLOR[ch]
    return field


def render_camera_like(
    world: WorldState, pose: Pose, config: WorldConfig = WorldConfig()
) -> SensorFrame:
    """Color raster degraded by distance-proportional Gaussian blur.

    The blur sigma grows linearly from 0 at the sensor to camera_max_blur
    cells at the visibility radius; per-cell values interpolate between a
    small bank of uniformly blurred copies.
    """
    size = config.sensor_raster
    field = camera_color_field(world, pose, config)
    cell = 2 * config.visibility_radius / size
    ex, ey = _cell_centers(size, config.visibility_radius)
    range_m = np.sqrt(ex * ex + ey * ey)
    sigma_map = config.camera_max_blur * np.minimum(range_m, config.visibility_radius) / config.visibility_radius

    n_bands = 6
    sigmas = np.linspace(0.0, config.camera_max_blur, n_bands)
    bands = np.stack(
        [np.stack([_gaussian_blur_2d(field[ch], s) for ch in range(3)]) for s in sigmas]
    )  # (n_bands, 3, S, S)

    if config.camera_max_blur <= 1e-6:
        out = field.copy()
    else:
        pos = sigma_map / config.camera_max_blur * (n_bands - 1)
        lo = np.clip(np.floor(pos).astype(np.intp), 0, n_bands - 2)
        frac = (pos - lo).astype(np.float32)
        rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        low = bands[lo, :, rows, cols].transpose(2, 0, 1)
        high = bands[lo + 1, :, rows, cols].transpose(2, 0, 1)
        out = low + frac[None] * (high - low)

    if config.camera_noise_std > 0:
        rng = derive_rng(config.render_seed, world.scene_id, pose.x, pose.y, "camera_noise")
        out = out + rng.normal(0.0, config.camera_noise_std, out.shape).astype(np.float32)

    return SensorFrame(modality="camera_like", grid=Grid(out[None].astype(np.float32)))


_RENDER_CACHE: Dict[tuple, SensorFrame] = {}
_RENDER_CACHE_MAX = 4096


def render_frame(
    world: WorldState, pose: Pose, modality: str, config: WorldConfig = WorldConfig()
) -> SensorFrame:
    """Sensor raster for one (world, pose, modality, geometry).

    Pure in its inputs, so results are memoized: training revisits the same
    frame every epoch and evaluation re-renders it per noise level and mode.
    Cached grids are marked read-only; callers must treat them as values.
    """
    key = (
        world.scene_id,
        world.extent,
        world.layout.tobytes(),
        tuple(world.objects),
        pose.x,
        pose.y,
        pose.yaw,
        modality,
        config,
    )
    hit = _RENDER_CACHE.get(key)
    if hit is not None:
        return hit
    if modality == "lidar_like":
        frame = render_lidar_like(world, pose, config)
    elif modality == "camera_like":
        frame = render_camera_like(world, pose, config)
    else:
        raise ConfigurationError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    frame.grid.values.setflags(write=False)
    if len(_RENDER_CACHE) >= _RENDER_CACHE_MAX:
        _RENDER_CACHE.clear()
    _RENDER_CACHE[key] = frame
    return frame


# ---------------------------------------------------------------------------
# ground truth


def make_ground_truth(
    world: WorldState, pose: Pose, task: str, config: WorldConfig = WorldConfig()
) -> GroundTruth:
    """Task targets in the ego frame of the TRUE pose, range-gated only.

    Occlusion does not remove content here; an agent is accountable for
    everything inside its visibility disc.
    """
    if task == "detection":
        q = _cardinal_quadrant(pose.yaw)
        boxes: List[Box] = []
        for o in world.objects:
            dx, dy = o.center_x - pose.x, o.center_y - pose.y
            if dx * dx + dy * dy > config.visibility_radius**2:
                continue
            if q == 0:
                ex, ey = dx, dy
            elif q == 1:
                ex, ey = dy, -dx
            elif q == 2:
                ex, ey = -dx, -dy
            else:
                ex, ey = -dy, dx
            w, h = (o.width, o.height) if q % 2 == 0 else (o.height, o.width)
            boxes.append(
                Box(
                    center_x=float(ex),
                    center_y=float(ey),
                    width=float(w),
                    height=float(h),
                    direction=(o.heading - q) % 4,
                    score=1.0,
                )
            )
        return GroundTruth(task=task, boxes=boxes)

    if task in ("static_seg", "dynamic_seg"):
        dynamic, road, in_range = _rasterize(world, pose, config.out_raster, config.visibility_radius)
        mask = (road if task == "static_seg" else dynamic) & in_range
        return GroundTruth(task=task, mask=mask)

    raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")


# ---------------------------------------------------------------------------
# scene text round-trip


def dump_scene(world: WorldState) -> str:
    """Versioned structured text; the layout bitmap is run-length encoded."""
    lines = [f"scene {SCENE_FORMAT_VERSION}"]
    lines.append(f"scene_id {world.scene_id}")
    lines.append(f"extent {world.extent!r}")
    n = world.layout.shape[0]
    lines.append(f"layout_raster {n}")
    lines.append(f"objects {len(world.objects)}")
    for o in world.objects:
        lines.append(
            f"o {o.center_x!r} {o.center_y!r} {o.width!r} {o.height!r} {o.heading}"
        )
    flat = world.layout.reshape(-1)
    runs: List[int] = []
    current, count = False, 0
    for v in flat:
        if bool(v) == current:
            count += 1
        else:
            runs.append(count)
            current, count = bool(v), 1
    runs.append(count)
    lines.append("layout_rle " + " ".join(str(r) for r in runs))
    lines.append("end")
    return "\n".join(lines) + "\n"


def load_scene(text: str) -> WorldState:
    """Inverse of dump_scene; malformed input raises naming the bad field."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("scene "):
        raise ProtocolError("scene text: missing 'scene <version>' header")
    version = lines[0].split()[1]
    if int(version) != SCENE_FORMAT_VERSION:
        raise ProtocolError(f"scene text: unsupported version {version}")

    fields = {}
    objects: List[WorldObject] = []
    rle: Optional[List[int]] = None
    for ln in lines[1:]:
        parts = ln.split()
        key = parts[0]
        if key == "o":
            if len(parts) != 6:
                raise ProtocolError(f"scene text: object line needs 5 values, got {ln!r}")
            objects.append(
                WorldObject(
                    float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]), int(parts[5])
                )
            )
        elif key == "layout_rle":
            rle = [int(p) for p in parts[1:]]
        elif key == "end":
            break
        else:
            fields[key] = parts[1]

    for req in ("scene_id", "extent", "layout_raster", "objects"):
        if req not in fields:
            raise ProtocolError(f"scene text: missing field {req!r}")
    n = int(fields["layout_raster"])
    if rle is None:
        raise ProtocolError("scene text: missing field 'layout_rle'")
    if sum(rle) != n * n:
        raise ProtocolError(
            f"scene text: layout_rle runs sum to {sum(rle)}, expected {n * n}"
        )
    if len(objects) != int(fields["objects"]):
        raise ProtocolError(
            f"scene text: objects count {int(fields['objects'])} != {len(objects)} object lines"
        )
    flat = np.zeros(n * n, dtype=bool)
    idx, value = 0, False
    for run in rle:
        if value:
            flat[idx : idx + run] = True
        idx += run
        value = not value
    return WorldState(
        scene_id=int(fields["scene_id"]),
        extent=float(fields["extent"]),
        layout=flat.reshape(n, n),
        objects=objects,
    )
