"""Per-agent perception stacks over bird's-eye-view rasters.

Each agent owns an encoder (strided conv stages at an internal width,
then a linear 1x1 projection to its feature channels), a fusion module
(channelwise max with a learned gate, or single-head per-cell attention
with the ego feature as query), and a task decoder (detection heads or a
segmentation head).  Heterogeneity across agents lives entirely in the
spec: modality, feature channels, feature resolution, depth, fusion
family, and task.

Also home to the detection toolbox: box IoU, greedy NMS decoding, and
average precision with all-point interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numeric as nm
from .errors import ConfigurationError, DimensionError, PreconditionError
from .numeric import Grid, ParamStore
from .seeding import derive_rng

MODALITY_CHANNELS = {"lidar_like": 2, "camera_like": 3}
FUSION_KINDS = ("max_gate", "attention")
TASK_KINDS = ("detection", "static_seg", "dynamic_seg")

# detection loss weights: classification, box regression, direction
DET_W_CLS = 1.0
DET_W_REG = 2.0
DET_W_DIR = 0.2

ENCODER_CORE_RES = 12  # heavy conv work happens at or below this resolution


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in ego meters; direction is a cardinal-axis code."""

    center_x: float
    center_y: float
    width: float
    height: float
    direction: int = 0
    score: float = 1.0


@dataclass
class DetectionOutput:
    cls: Grid  # (1, 1, W, W) objectness logits
    reg: Grid  # (1, 4, W, W) dx, dy, log w, log h in feature cells
    dir: Grid  # (1, 2, W, W) cardinal-axis logits


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    modality: str = "lidar_like"
    task: str = "detection"
    channels: int = 32
    feature_resolution: int = 24
    depth: int = 3
    fusion: str = "max_gate"
    encoder_width: int = 64
    head_width: int = 32
    sensor_raster: int = 48
    out_raster: int = 48
    view_radius: float = 24.0

    def validate(self) -> "AgentSpec":
        if self.modality not in MODALITY_CHANNELS:
            raise ConfigurationError(f"agent {self.agent_id}: unknown modality {self.modality!r}")
        if self.task not in TASK_KINDS:
            raise ConfigurationError(f"agent {self.agent_id}: unknown task {self.task!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigurationError(f"agent {self.agent_id}: unknown fusion {self.fusion!r}")
        if self.channels < 1 or self.encoder_width < 1 or self.head_width < 1:
            raise ConfigurationError(f"agent {self.agent_id}: widths must be positive")
        if self.depth < 1 or self.depth > 6:
            raise ConfigurationError(f"agent {self.agent_id}: depth {self.depth} outside [1, 6]")
        if self.sensor_raster % self.feature_resolution != 0:
            raise ConfigurationError(
                f"agent {self.agent_id}: feature resolution {self.feature_resolution} "
                f"must divide the sensor raster {self.sensor_raster}"
            )
        return self

    @property
    def feature_cell_m(self) -> float:
        return 2 * self.view_radius / self.feature_resolution

    def encoder_strides(self) -> List[int]:
        strides = []
        res = self.sensor_raster
        for _ in range(self.depth):
            if res > ENCODER_CORE_RES:
                strides.append(2)
                res //= 2
            else:
                strides.append(1)
        return strides


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _add_conv(store: ParamStore, rng, name: str, cout: int, cin: int, k: int) -> None:
    store.add(f"{name}.w", Grid(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)))
    store.add(f"{name}.b", Grid(np.zeros(cout, dtype=np.float32)))


def _add_identity_conv(store: ParamStore, name: str, c: int) -> None:
    w = np.zeros((c, c, 1, 1), dtype=np.float32)
    w[np.arange(c), np.arange(c), 0, 0] = 1.0
    store.add(f"{name}.w", Grid(w))
    store.add(f"{name}.b", Grid(np.zeros(c, dtype=np.float32)))


def _conv(store: ParamStore, name: str, x: Grid, stride: int = 1, padding: int = 0) -> Grid:
    return nm.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=stride, padding=padding)


class AgentModel:
    """Spec plus parameters plus the three forward stages."""

    def __init__(self, spec: AgentSpec, seed: int = 0):
        self.spec = spec.validate()
        self.params = ParamStore()
        rng = derive_rng(seed, "model", spec.agent_id)
        self._build(rng)

    def _build(self, rng: np.random.Generator) -> None:
        s = self.spec
        cin = MODALITY_CHANNELS[s.modality]
        width = s.encoder_width
        for k, stride in enumerate(s.encoder_strides()):
            # 4x4 kernels halve even sizes exactly with padding 1; 3x3 keeps size
            _add_conv(self.params, rng, f"encoder.stage{k}", width, cin if k == 0 else width,
                      4 if stride == 2 else 3)
            self.params.add(f"encoder.stage{k}.ln_scale", Grid(np.ones((1, width, 1, 1), dtype=np.float32)))
            self.params.add(f"encoder.stage{k}.ln_shift", Grid(np.zeros((1, width, 1, 1), dtype=np.float32)))
        _add_conv(self.params, rng, "encoder.proj", s.channels, width, 1)

        c = s.channels
        if s.fusion == "max_gate":
            _add_identity_conv(self.params, "fusion.gate", c)
        else:
            _add_conv(self.params, rng, "fusion.q", c, c, 1)
            _add_conv(self.params, rng, "fusion.k", c, c, 1)
            _add_identity_conv(self.params, "fusion.v", c)
            _add_identity_conv(self.params, "fusion.proj", c)

        # 3x3 trunk so the 1x1 heads can see object extent in neighbor cells
        _add_conv(self.params, rng, "decoder.hidden", s.head_width, c, 3)
        if s.task == "detection":
            _add_conv(self.params, rng, "decoder.cls", 1, s.head_width, 1)
            _add_conv(self.params, rng, "decoder.reg", 4, s.head_width, 1)
            _add_conv(self.params, rng, "decoder.dir", 2, s.head_width, 1)
        else:
            _add_conv(self.params, rng, "decoder.mask", 1, s.head_width, 1)

    # ---------------------------------------------------------------- stages

    def encode(self, frame: Grid) -> Grid:
        """Sensor raster (1, C_mod, S, S) -> local feature (1, C_i, W_i, W_i)."""
        s = self.spec
        cin = MODALITY_CHANNELS[s.modality]
        if frame.shape[1] != cin:
            raise DimensionError(
                f"agent {s.agent_id}: frame has {frame.shape[1]} channels "
                f"on the channel axis, expected {cin} for {s.modality}"
            )
        h = frame
        for k, stride in enumerate(s.encoder_strides()):
            h = _conv(self.params, f"encoder.stage{k}", h, stride=stride, padding=1)
            h = nm.layer_norm(h)
            h = nm.add(
                nm.mul(h, self.params[f"encoder.stage{k}.ln_scale"]),
                self.params[f"encoder.stage{k}.ln_shift"],
            )
            h = nm.gelu(h)
        h = _conv(self.params, "encoder.proj", h)
        if h.shape[2] != s.feature_resolution:
            h = nm.resize_bilinear(h, s.feature_resolution, s.feature_resolution)
        return h

    def fuse(self, features: Sequence[Grid], ego_index: int = 0) -> Grid:
        """Combine ego + neighbor features (all already in the ego frame)."""
        if len(features) == 0:
            raise PreconditionError("fuse: need at least the ego feature")
        if not 0 <= ego_index < len(features):
            raise PreconditionError(f"fuse: ego_index {ego_index} outside the feature list")
        shape = features[ego_index].shape
        for i, f in enumerate(features):
            if f.shape != shape:
                raise DimensionError(
                    f"fuse: feature {i} shape {f.shape} != ego shape {shape} (channel/space axes)"
                )
        if self.spec.fusion == "max_gate":
            m = features[0]
            for f in features[1:]:
                m = nm.maximum(m, f)
            return _conv(self.params, "fusion.gate", m)

        ego = features[ego_index]
        c = self.spec.channels
        q = _conv(self.params, "fusion.q", ego)
        scores = []
        values = []
        inv_sqrt = 1.0 / math.sqrt(c)
        for f in features:
            kf = _conv(self.params, "fusion.k", f)
            vf = _conv(self.params, "fusion.v", f)
            s = nm.scale(nm.sum_axis(nm.mul(q, kf), axis=1, keepdims=True), inv_sqrt)
            scores.append(s)
            values.append(vf)
        m = scores[0]
        for s in scores[1:]:
            m = nm.maximum(m, s)
        exps = [nm.exp(nm.sub(s, m)) for s in scores]
        z = exps[0]
        for e in exps[1:]:
            z = nm.add(z, e)
        out = None
        for e, v in zip(exps, values):
            w = nm.div(e, z)
            term = nm.mul(w, v)
            out = term if out is None else nm.add(out, term)
        return _conv(self.params, "fusion.proj", out)

    def decode(self, fused: Grid) -> Union[DetectionOutput, Grid]:
        """Fused feature -> detection head grids, or segmentation logits."""
        s = self.spec
        h = nm.gelu(_conv(self.params, "decoder.hidden", fused, padding=1))
        if s.task == "detection":
            return DetectionOutput(
                cls=_conv(self.params, "decoder.cls", h),
                reg=_conv(self.params, "decoder.reg", h),
                dir=_conv(self.params, "decoder.dir", h),
            )
        logits = _conv(self.params, "decoder.mask", h)
        if logits.shape[2] != s.out_raster:
            logits = nm.resize_bilinear(logits, s.out_raster, s.out_raster)
        return logits

    def forward_single(self, frame: Grid) -> Union[DetectionOutput, Grid]:
        return self.decode(self.fuse([self.encode(frame)]))


# ---------------------------------------------------------------------------
# task losses


def detection_targets(boxes: Sequence[Box], spec: AgentSpec):
    """Rasterize GT boxes onto the feature grid.

    Returns (cls, reg, dir_onehot, positive mask) numpy arrays; reg is
    (dx, dy, log w, log h) in feature-cell units at the center cell.
    """
    w = spec.feature_resolution
    cell = spec.feature_cell_m
    r = spec.view_radius
    cls_t = np.zeros((1, 1, w, w), dtype=np.float32)
    reg_t = np.zeros((1, 4, w, w), dtype=np.float32)
    dir_t = np.zeros((1, 2, w, w), dtype=np.float32)
    for b in boxes:
        col = int((b.center_x + r) / cell)
        row = int((b.center_y + r) / cell)
        if not (0 <= col < w and 0 <= row < w):
            continue
        ccx = (col + 0.5) * cell - r
        ccy = (row + 0.5) * cell - r
        cls_t[0, 0, row, col] = 1.0
        reg_t[0, 0, row, col] = (b.center_x - ccx) / cell
        reg_t[0, 1, row, col] = (b.center_y - ccy) / cell
        reg_t[0, 2, row, col] = math.log(max(b.width, 1e-3) / cell)
        reg_t[0, 3, row, col] = math.log(max(b.height, 1e-3) / cell)
        dir_t[0, :, row, col] = 0.0
        dir_t[0, b.direction % 2, row, col] = 1.0
    return cls_t, reg_t, dir_t, cls_t[0, 0]


def _disc_cells(spec: AgentSpec, margin_cells: float = 0.0) -> np.ndarray:
    """Cells whose center lies inside the view disc, shrunk by a margin."""
    w = spec.feature_resolution
    cell = spec.feature_cell_m
    coords = (np.arange(w) + 0.5) * cell - spec.view_radius
    xx, yy = np.meshgrid(coords, coords)
    return np.hypot(xx, yy) <= spec.view_radius - margin_cells * cell


def detection_loss(output: DetectionOutput, boxes: Sequence[Box], spec: AgentSpec) -> Grid:
    cls_t, reg_t, dir_t, pos = detection_targets(boxes, spec)
    per_cell = nm.bce_logits(output.cls, cls_t)
    n_pos = float(pos.sum())
    # targets stop at the view disc, so cells beyond it (and a one-cell rim
    # band, where the gate truncates real objects) are unlabelable for a
    # translation-equivariant head; they count for nothing
    care = _disc_cells(spec, margin_cells=1.0)
    if n_pos == 0:
        m = Grid(care[None, None].astype(np.float32))
        return nm.scale(nm.sum_all(nm.mul(per_cell, m)), DET_W_CLS / float(care.sum()))
    # object cells are rare (~2% of the grid); weight the two classes
    # equally or positive scores never clear the decoding threshold
    pos_m = pos[None, None]
    neg_m = (care & (pos == 0))[None, None].astype(np.float32)
    cls_term = nm.scale(
        nm.add(
            nm.scale(nm.sum_all(nm.mul(per_cell, Grid(pos_m))), 1.0 / n_pos),
            nm.scale(nm.sum_all(nm.mul(per_cell, Grid(neg_m))), 1.0 / float(neg_m.sum())),
        ),
        0.5,
    )
    loss = nm.scale(cls_term, DET_W_CLS)
    reg_err = nm.huber(nm.sub(output.reg, Grid(reg_t)))
    reg_term = nm.scale(nm.sum_all(nm.mul(reg_err, Grid(pos_m))), 1.0 / (4.0 * n_pos))
    logp = nm.log_softmax(output.dir, axis=1)
    dir_term = nm.scale(nm.sum_all(nm.mul(logp, Grid(dir_t))), -1.0 / n_pos)
    return nm.add(loss, nm.add(nm.scale(reg_term, DET_W_REG), nm.scale(dir_term, DET_W_DIR)))


def segmentation_loss(logits: Grid, mask: np.ndarray, spec: AgentSpec) -> Grid:
    target = mask.astype(np.float32)[None, None]
    if logits.shape != target.shape:
        raise DimensionError(
            f"segmentation_loss: logits {logits.shape} vs mask {target.shape} (spatial axes)"
        )
    return nm.mean_all(nm.bce_logits(logits, target))


def task_loss(output, ground_truth, spec: AgentSpec) -> Grid:
    """Scalar training loss for whichever task the spec declares."""
    if spec.task == "detection":
        if ground_truth.boxes is None:
            raise PreconditionError("detection loss needs ground-truth boxes")
        return detection_loss(output, ground_truth.boxes, spec)
    if ground_truth.mask is None:
        raise PreconditionError("segmentation loss needs a ground-truth mask")
    return segmentation_loss(output, ground_truth.mask, spec)


# ---------------------------------------------------------------------------
# detection decoding and metrics


def box_iou(a: Box, b: Box) -> float:
    ix = min(a.center_x + a.width / 2, b.center_x + b.width / 2) - max(
        a.center_x - a.width / 2, b.center_x - b.width / 2
    )
    iy = min(a.center_y + a.height / 2, b.center_y + b.height / 2) - max(
        a.center_y - a.height / 2, b.center_y - b.height / 2
    )
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def nms(boxes: List[Box], iou_threshold: float = 0.5) -> List[Box]:
    """Greedy NMS; ties break on score then insertion order (row-major cells)."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    keep: List[Box] = []
    for i in order:
        if all(box_iou(boxes[i], k) < iou_threshold for k in keep):
            keep.append(boxes[i])
    return keep


def decode_boxes(
    output: DetectionOutput,
    spec: AgentSpec,
    score_threshold: float = 0.3,
    nms_iou: float = 0.5,
) -> List[Box]:
    """Detection head grids -> scored ego-frame boxes after greedy NMS."""
    w = spec.feature_resolution
    cell = spec.feature_cell_m
    r = spec.view_radius
    scores = 1.0 / (1.0 + np.exp(-output.cls.values[0, 0].astype(np.float64)))
    reg = output.reg.values[0]
    dirs = np.argmax(output.dir.values[0], axis=0)
    in_disc = _disc_cells(spec)
    cand: List[Box] = []
    for row in range(w):
        for col in range(w):
            sc = float(scores[row, col])
            if sc < score_threshold or not in_disc[row, col]:
                continue
            # peak filter: adjacent runner-up cells of the same object would
            # otherwise decode as high-scoring near-duplicates
            if sc < scores[max(0, row - 1) : row + 2, max(0, col - 1) : col + 2].max():
                continue
            ccx = (col + 0.5) * cell - r
            ccy = (row + 0.5) * cell - r
            cand.append(
                Box(
                    center_x=ccx + float(reg[0, row, col]) * cell,
                    center_y=ccy + float(reg[1, row, col]) * cell,
                    width=float(np.exp(np.clip(reg[2, row, col], -6, 6))) * cell,
                    height=float(np.exp(np.clip(reg[3, row, col], -6, 6))) * cell,
                    direction=int(dirs[row, col]),
                    score=sc,
                )
            )
    return nms(cand, nms_iou)


def match_predictions(
    preds: Sequence[Box], gts: Sequence[Box], iou_threshold: float
) -> List[Tuple[float, bool]]:
    """Score-ordered greedy matching; each GT is consumed at most once."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    out: List[Tuple[float, bool]] = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            iou = box_iou(preds[i], g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        tp = best_iou >= iou_threshold and best_j >= 0 and not taken[best_j]
        if tp:
            taken[best_j] = True
        out.append((preds[i].score, tp))
    return out


def _ap_from_matches(matches: List[Tuple[float, bool]], n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if len(matches) == 0 else 0.0
    if len(matches) == 0:
        return 0.0
    matches = sorted(matches, key=lambda m: -m[0])
    tp = np.cumsum([1.0 if m[1] else 0.0 for m in matches])
    fp = np.cumsum([0.0 if m[1] else 1.0 for m in matches])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # all-point interpolation: integrate the running-max precision envelope
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(
    preds: Sequence[Box], gts: Sequence[Box], iou_threshold: float = 0.5
) -> float:
    """AP with all-point interpolation for one scene's predictions."""
    return _ap_from_matches(match_predictions(preds, gts, iou_threshold), len(gts))


def pooled_average_precision(
    per_scene: Sequence[Tuple[Sequence[Box], Sequence[Box]]], iou_threshold: float = 0.5
) -> float:
    """One PR curve over many scenes (matching stays within each scene)."""
    matches: List[Tuple[float, bool]] = []
    n_gt = 0
    for preds, gts in per_scene:
        matches.extend(match_predictions(preds, gts, iou_threshold))
        n_gt += len(gts)
    if n_gt == 0:
        return 1.0 if len(matches) == 0 else 0.0
    return _ap_from_matches(matches, n_gt)


def mean_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Mean IoU over the two classes {foreground, background}.

    A class absent from both masks counts as IoU 1 for that class.
    """
    if pred_mask.shape != gt_mask.shape:
        raise DimensionError(
            f"mean_iou: masks disagree, {pred_mask.shape} vs {gt_mask.shape} (spatial axes)"
        )
    p = pred_mask.astype(bool)
    g = gt_mask.astype(bool)
    ious = []
    for cls_p, cls_g in ((p, g), (~p, ~g)):
        union = np.logical_or(cls_p, cls_g).sum()
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(float(np.logical_and(cls_p, cls_g).sum() / union))
    return float(np.mean(ious))


def segmentation_mask(logits: Grid) -> np.ndarray:
    return (logits.values[0, 0] > 0.0)  # sigmoid(x) > 0.5 iff x > 0
