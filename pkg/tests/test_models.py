"""Agent models, fusion families, task losses, detection metrics.

The NMS and AP tests compare against brute-force oracles implemented
here with different data layouts than the library uses.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from cfa_lab import models as md
from cfa_lab import numeric as nm
from cfa_lab.errors import ConfigurationError, DimensionError, PreconditionError
from cfa_lab.numeric import Grid

SPEC_DET = md.AgentSpec(agent_id=1, modality="lidar_like", task="detection",
                        channels=64, feature_resolution=12, depth=4, fusion="attention")
SPEC_CAM = md.AgentSpec(agent_id=2, modality="camera_like", task="detection",
                        channels=32, feature_resolution=12, depth=3, fusion="max_gate")
SPEC_SEG = md.AgentSpec(agent_id=3, modality="lidar_like", task="static_seg",
                        channels=32, feature_resolution=24, depth=3, fusion="max_gate")
SPEC_DYN = md.AgentSpec(agent_id=4, modality="lidar_like", task="dynamic_seg",
                        channels=16, feature_resolution=24, depth=2, fusion="max_gate")
ROSTER = (SPEC_DET, SPEC_CAM, SPEC_SEG, SPEC_DYN)


def rand_frame(spec, seed=0):
    rng = np.random.default_rng(seed)
    c = md.MODALITY_CHANNELS[spec.modality]
    return Grid(rng.standard_normal((1, c, spec.sensor_raster, spec.sensor_raster)).astype(np.float32) * 0.5)


def rand_feature(spec, seed=0):
    rng = np.random.default_rng(seed)
    return Grid(rng.standard_normal((1, spec.channels, spec.feature_resolution,
                                     spec.feature_resolution)).astype(np.float32))


# ---------------------------------------------------------------------------
# encoder


@pytest.mark.parametrize("spec", ROSTER, ids=lambda s: f"agent{s.agent_id}")
def test_encoder_output_shape(spec):
    model = md.AgentModel(spec, seed=0)
    feat = model.encode(rand_frame(spec))
    assert feat.shape == (1, spec.channels, spec.feature_resolution, spec.feature_resolution)


def test_encoder_zero_input_gives_zero_feature():
    model = md.AgentModel(SPEC_SEG, seed=1)
    frame = Grid(np.zeros((1, 2, 48, 48), dtype=np.float32))
    assert np.all(model.encode(frame).values == 0.0)


def test_encoder_rejects_wrong_modality_channels():
    model = md.AgentModel(SPEC_DET, seed=0)
    with pytest.raises(DimensionError, match="channel"):
        model.encode(Grid(np.zeros((1, 3, 48, 48), dtype=np.float32)))


def test_model_init_is_seeded():
    a = md.AgentModel(SPEC_CAM, seed=5)
    b = md.AgentModel(SPEC_CAM, seed=5)
    c = md.AgentModel(SPEC_CAM, seed=6)
    for (n1, g1), (_, g2), (_, g3) in zip(a.params.items(), b.params.items(), c.params.items()):
        assert np.array_equal(g1.values, g2.values), n1
    assert any(
        not np.array_equal(g1.values, g3.values)
        for (_, g1), (_, g3) in zip(a.params.items(), c.params.items())
    )


def test_agent_spec_validation():
    with pytest.raises(ConfigurationError, match="modality"):
        md.AgentSpec(agent_id=1, modality="radar").validate()
    with pytest.raises(ConfigurationError, match="divide"):
        md.AgentSpec(agent_id=1, feature_resolution=13).validate()
    with pytest.raises(ConfigurationError, match="fusion"):
        md.AgentSpec(agent_id=1, fusion="mean").validate()


# ---------------------------------------------------------------------------
# fusion


def test_max_gate_identity_on_single_feature():
    model = md.AgentModel(SPEC_SEG, seed=0)  # gate initializes to identity
    f = rand_feature(SPEC_SEG, seed=3)
    out = model.fuse([f])
    assert np.array_equal(out.values, f.values)


def test_max_gate_duplicate_feature_changes_nothing():
    model = md.AgentModel(SPEC_SEG, seed=0)
    f = rand_feature(SPEC_SEG, seed=4)
    assert np.array_equal(model.fuse([f, f]).values, model.fuse([f]).values)


def test_max_gate_permutation_invariance_is_bitwise():
    model = md.AgentModel(SPEC_SEG, seed=2)
    ego = rand_feature(SPEC_SEG, seed=5)
    n1 = rand_feature(SPEC_SEG, seed=6)
    n2 = rand_feature(SPEC_SEG, seed=7)
    a = model.fuse([ego, n1, n2]).values
    b = model.fuse([ego, n2, n1]).values
    assert a.tobytes() == b.tobytes()


def test_attention_single_feature_is_identity_at_init():
    model = md.AgentModel(SPEC_DET, seed=0)  # value/proj convs initialize to identity
    f = rand_feature(SPEC_DET, seed=8)
    out = model.fuse([f])
    assert np.allclose(out.values, f.values, atol=1e-6)


def test_attention_weights_sum_to_one_and_permutation_tolerance():
    model = md.AgentModel(SPEC_DET, seed=3)
    ego = rand_feature(SPEC_DET, seed=9)
    n1 = rand_feature(SPEC_DET, seed=10)
    n2 = rand_feature(SPEC_DET, seed=11)
    a = model.fuse([ego, n1, n2], ego_index=0).values
    b = model.fuse([ego, n2, n1], ego_index=0).values
    assert np.allclose(a, b, atol=1e-5)


def test_fuse_rejects_mismatched_shapes():
    model = md.AgentModel(SPEC_SEG, seed=0)
    f = rand_feature(SPEC_SEG)
    bad = Grid(np.zeros((1, SPEC_SEG.channels, 12, 12), dtype=np.float32))
    with pytest.raises(DimensionError, match="shape"):
        model.fuse([f, bad])
    with pytest.raises(PreconditionError):
        model.fuse([])


# ---------------------------------------------------------------------------
# decoding heads and losses


def test_detection_decoder_shapes():
    model = md.AgentModel(SPEC_DET, seed=0)
    out = model.decode(rand_feature(SPEC_DET))
    w = SPEC_DET.feature_resolution
    assert out.cls.shape == (1, 1, w, w)
    assert out.reg.shape == (1, 4, w, w)
    assert out.dir.shape == (1, 2, w, w)


def test_segmentation_decoder_upsamples_to_out_raster():
    model = md.AgentModel(SPEC_SEG, seed=0)
    logits = model.decode(rand_feature(SPEC_SEG))
    assert logits.shape == (1, 1, SPEC_SEG.out_raster, SPEC_SEG.out_raster)


def make_gt(boxes):
    class GT:
        pass

    gt = GT()
    gt.boxes = boxes
    gt.mask = None
    return gt


def test_detection_loss_zero_logits_empty_gt_is_ln2():
    w = SPEC_DET.feature_resolution
    out = md.DetectionOutput(
        cls=Grid(np.zeros((1, 1, w, w), dtype=np.float32)),
        reg=Grid(np.zeros((1, 4, w, w), dtype=np.float32)),
        dir=Grid(np.zeros((1, 2, w, w), dtype=np.float32)),
    )
    loss = md.detection_loss(out, [], SPEC_DET)
    assert abs(loss.item() - math.log(2.0)) < 1e-6


def test_detection_loss_perfect_logits_near_zero():
    boxes = [md.Box(3.0, -5.0, 4.2, 2.0, direction=0), md.Box(-8.0, 7.0, 2.0, 4.4, direction=1)]
    cls_t, reg_t, dir_t, _ = md.detection_targets(boxes, SPEC_DET)
    out = md.DetectionOutput(
        cls=Grid((cls_t * 40.0 - 20.0).astype(np.float32)),
        reg=Grid(reg_t),
        dir=Grid((dir_t * 40.0 - 20.0).astype(np.float32)),
    )
    assert md.detection_loss(out, boxes, SPEC_DET).item() < 1e-3


def test_segmentation_loss_perfect_logits_near_zero():
    mask = np.zeros((48, 48), dtype=bool)
    mask[10:20, 4:30] = True
    logits = Grid(np.where(mask, 20.0, -20.0).astype(np.float32)[None, None])
    assert md.segmentation_loss(logits, mask, SPEC_SEG).item() < 1e-3


def test_detection_loss_is_differentiable():
    model = md.AgentModel(SPEC_DET, seed=0)
    feat = rand_feature(SPEC_DET, seed=12)
    feat.requires_grad = True
    out = model.decode(feat)
    loss = md.detection_loss(out, [md.Box(2.0, 2.0, 4.0, 2.0)], SPEC_DET)
    loss.backward()
    assert feat.grad is not None and np.any(feat.grad != 0)


# ---------------------------------------------------------------------------
# box metrics against brute-force oracles


def test_box_iou_known_values():
    a = md.Box(0.0, 0.0, 1.0, 1.0)
    assert md.box_iou(a, a) == pytest.approx(1.0)
    assert md.box_iou(a, md.Box(5.0, 5.0, 1.0, 1.0)) == 0.0
    # quarter overlap of unit squares: 0.25 / 1.75 = 1/7
    b = md.Box(0.5, 0.5, 1.0, 1.0)
    assert abs(md.box_iou(a, b) - 1.0 / 7.0) < 1e-6


def random_boxes(rng, n, spread=20.0):
    out = []
    for _ in range(n):
        out.append(
            md.Box(
                center_x=float(rng.uniform(-spread, spread)),
                center_y=float(rng.uniform(-spread, spread)),
                width=float(rng.uniform(1.0, 6.0)),
                height=float(rng.uniform(1.0, 6.0)),
                direction=int(rng.integers(0, 2)),
                score=float(rng.uniform(0.05, 1.0)),
            )
        )
    return out


def oracle_iou(a, b):
    ax0, ax1 = a.center_x - a.width / 2, a.center_x + a.width / 2
    ay0, ay1 = a.center_y - a.height / 2, a.center_y + a.height / 2
    bx0, bx1 = b.center_x - b.width / 2, b.center_x + b.width / 2
    by0, by1 = b.center_y - b.height / 2, b.center_y + b.height / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def oracle_nms(boxes, thr):
    """Brute force: repeatedly take the best remaining box, drop overlaps."""
    remaining = list(enumerate(boxes))
    kept = []
    while remaining:
        best = min(remaining, key=lambda ib: (-ib[1].score, ib[0]))
        kept.append(best[1])
        remaining = [
            (i, b) for i, b in remaining if i != best[0] and oracle_iou(best[1], b) < thr
        ]
    return kept


def oracle_ap(preds, gts, thr):
    """AP by direct envelope integration over every operating point."""
    if len(gts) == 0:
        return 1.0 if len(preds) == 0 else 0.0
    if len(preds) == 0:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    used = set()
    flags = []
    for i in order:
        ious = [oracle_iou(preds[i], g) for g in gts]
        best = int(np.argmax(ious)) if ious else -1
        if best >= 0 and ious[best] >= thr and best not in used:
            used.add(best)
            flags.append(True)
        else:
            flags.append(False)
    ap = 0.0
    prev_recall = 0.0
    tp = 0
    for k, f in enumerate(flags):
        if f:
            tp += 1
            recall = tp / len(gts)
            # best precision at any operating point with recall >= this one
            best_prec = 0.0
            tt = 0
            for kk, ff in enumerate(flags):
                if ff:
                    tt += 1
                if tt >= tp and kk >= k:
                    best_prec = max(best_prec, tt / (kk + 1))
            ap += (recall - prev_recall) * best_prec
            prev_recall = recall
    return ap


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for trial in range(10):
        boxes = random_boxes(rng, int(rng.integers(0, 25)), spread=8.0)
        got = md.nms(boxes, 0.5)
        want = oracle_nms(boxes, 0.5)
        assert got == want


@pytest.mark.parametrize("seed", range(10))
def test_average_precision_matches_brute_force(seed):
    rng = np.random.default_rng(seed + 1000)
    for trial in range(10):
        gts = random_boxes(rng, int(rng.integers(0, 8)), spread=10.0)
        preds = []
        for g in gts:
            if rng.uniform() < 0.8:  # jittered copy of a GT box
                preds.append(
                    md.Box(
                        g.center_x + float(rng.normal(0, 0.8)),
                        g.center_y + float(rng.normal(0, 0.8)),
                        g.width * float(rng.uniform(0.8, 1.2)),
                        g.height * float(rng.uniform(0.8, 1.2)),
                        score=float(rng.uniform(0.1, 1.0)),
                    )
                )
        preds.extend(random_boxes(rng, int(rng.integers(0, 6)), spread=10.0))
        got = md.average_precision(preds, gts, 0.5)
        want = oracle_ap(preds, gts, 0.5)
        assert got == pytest.approx(want, abs=1e-9)


def test_average_precision_edge_cases():
    assert md.average_precision([], [], 0.5) == 1.0
    assert md.average_precision([md.Box(0, 0, 1, 1, score=0.9)], [], 0.5) == 0.0
    assert md.average_precision([], [md.Box(0, 0, 1, 1)], 0.5) == 0.0
    perfect = [md.Box(0, 0, 2, 2, score=0.9)]
    assert md.average_precision(perfect, [md.Box(0, 0, 2, 2)], 0.5) == 1.0


def test_pooled_average_precision_pools_across_scenes():
    g1 = [md.Box(0, 0, 2, 2)]
    p1 = [md.Box(0, 0, 2, 2, score=0.9)]
    g2 = [md.Box(5, 5, 2, 2)]
    p2 = [md.Box(-5, -5, 2, 2, score=0.95)]  # confident miss in scene 2
    pooled = md.pooled_average_precision([(p1, g1), (p2, g2)], 0.5)
    # one TP at rank 2, one FP at rank 1 over 2 GT: AP = 0.5 * 0.5
    assert pooled == pytest.approx(0.25)


def test_decode_boxes_round_trip_through_targets():
    spec = SPEC_DET
    boxes = [md.Box(3.0, -5.0, 4.2, 2.0, direction=0), md.Box(-8.0, 7.0, 2.0, 4.4, direction=1)]
    cls_t, reg_t, dir_t, _ = md.detection_targets(boxes, spec)
    out = md.DetectionOutput(
        cls=Grid((cls_t * 40.0 - 20.0).astype(np.float32)),
        reg=Grid(reg_t),
        dir=Grid((dir_t * 40.0 - 20.0).astype(np.float32)),
    )
    decoded = md.decode_boxes(out, spec)
    assert len(decoded) == 2
    decoded = sorted(decoded, key=lambda b: b.center_x)
    want = sorted(boxes, key=lambda b: b.center_x)
    for d, wbox in zip(decoded, want):
        assert d.center_x == pytest.approx(wbox.center_x, abs=1e-4)
        assert d.center_y == pytest.approx(wbox.center_y, abs=1e-4)
        assert d.width == pytest.approx(wbox.width, rel=1e-4)
        assert d.height == pytest.approx(wbox.height, rel=1e-4)
        assert d.direction == wbox.direction % 2
        assert d.score > 0.99


def test_decode_boxes_threshold_and_nms():
    spec = SPEC_DET
    w = spec.feature_resolution
    cls = np.full((1, 1, w, w), -20.0, dtype=np.float32)
    cls[0, 0, 3, 3] = 6.0
    cls[0, 0, 3, 4] = 3.0  # same object, neighboring cell, lower score
    reg = np.zeros((1, 4, w, w), dtype=np.float32)
    reg[2:, :, :] = 0.3
    # shift the weaker cell's center onto the stronger one -> NMS removes it
    reg[0, 0, 3, 4] = -1.0
    out = md.DetectionOutput(cls=Grid(cls), reg=Grid(reg), dir=Grid(np.zeros((1, 2, w, w), np.float32)))
    kept = md.decode_boxes(out, spec, score_threshold=0.3, nms_iou=0.5)
    assert len(kept) == 1
    assert kept[0].score == pytest.approx(1 / (1 + math.exp(-6.0)), abs=1e-6)


# ---------------------------------------------------------------------------
# segmentation metric


def test_mean_iou_counting_oracle():
    pred = np.zeros((4, 4), dtype=bool)
    gt = np.zeros((4, 4), dtype=bool)
    pred[:2, :2] = True  # 4 cells
    gt[:2, :3] = True  # 6 cells, 4 shared
    fg = 4 / 6
    bg = 10 / 12
    assert md.mean_iou(pred, gt) == pytest.approx((fg + bg) / 2)


def test_mean_iou_empty_masks_is_one():
    z = np.zeros((5, 5), dtype=bool)
    assert md.mean_iou(z, z) == 1.0


def test_mean_iou_shape_mismatch():
    with pytest.raises(DimensionError):
        md.mean_iou(np.zeros((4, 4), bool), np.zeros((5, 5), bool))
