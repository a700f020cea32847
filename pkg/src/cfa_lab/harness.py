"""Experiments: baselines, noise sweeps, ablations, efficiency accounting.

One experiment = train the protocol model, every agent, and every
adapter/reverter pair on procedurally generated scenes, then score every
(mode, sigma) cell on a disjoint evaluation set.  Everything downstream of
the config seed is deterministic, so identical configs reproduce identical
reports byte for byte.

Pose-noise levels are written in *cells*: one cell is one sensor raster cell
(extent / sensor_raster meters, 1 m at defaults).  Reports carry the unit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import numeric as nm
from .cfa import (
    BLOCK_KINDS,
    AdapterReverterPair,
    CfaTrainConfig,
    ProtocolSpec,
    TrainScene,
    make_dataset,
    train_agent_local,
    train_cfa_pair,
    train_protocol,
)
from .errors import ConfigurationError, PreconditionError, TrainingError
from .models import (
    AgentModel,
    AgentSpec,
    mean_iou,
    pooled_average_precision,
    segmentation_mask,
    task_loss,
)
from .pipeline import (
    MODES,
    CollabRound,
    gather_contributions,
    make_round,
    restore_params,
    run_round,
    save_checkpoint,
    load_checkpoint,
)
from .world import WorldConfig, make_ground_truth, render_frame

LOSS_COMBOS = ("f_only", "d_only", "both")
ABLATION_AXES = ("channel_size", "block_kind", "loss_combo")

# Paper-scale training cost anchors, carried as metadata only (desk runs do
# not attempt to reproduce wall-clock figures).
REFERENCE_GPU_HOURS = {"stamp_marginal": 2.36, "e2e_marginal": 17.07}


def default_roster() -> Tuple[AgentSpec, ...]:
    """Four heterogeneous agents: two detectors, two segmenters."""
    return (
        AgentSpec(agent_id=1, modality="lidar_like", task="detection",
                  channels=64, feature_resolution=16, depth=4, fusion="attention"),
        AgentSpec(agent_id=2, modality="camera_like", task="detection",
                  channels=32, feature_resolution=24, depth=3),
        AgentSpec(agent_id=3, modality="lidar_like", task="static_seg",
                  channels=32, feature_resolution=24, depth=3),
        AgentSpec(agent_id=4, modality="lidar_like", task="dynamic_seg",
                  channels=16, feature_resolution=24, depth=2, encoder_width=80),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_train_scenes: int = 100
    n_eval_scenes: int = 6
    agents: Tuple[AgentSpec, ...] = ()
    protocol: ProtocolSpec = ProtocolSpec()
    cfa: CfaTrainConfig = CfaTrainConfig()
    world: WorldConfig = WorldConfig()
    sigmas: Tuple[float, ...] = (0.0, 0.2, 0.4)
    delta: float = 30.0
    modes: Tuple[str, ...] = MODES
    channel_sizes: Tuple[int, ...] = (16, 8, 4)
    block_kinds: Tuple[str, ...] = BLOCK_KINDS
    loss_combos: Tuple[str, ...] = LOSS_COMBOS

    def __post_init__(self):
        if not self.agents:
            object.__setattr__(self, "agents", default_roster())

    @property
    def sigma_cell_m(self) -> float:
        return self.world.extent / self.world.sensor_raster

    def validate(self) -> "ExperimentConfig":
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate agent ids in roster: {ids}")
        if 0 in ids:
            raise ConfigurationError("agent id 0 is reserved for the protocol model")
        for a in self.agents:
            a.validate()
        self.protocol.validate()
        self.cfa.validate()
        self.world.validate()
        if self.n_train_scenes < 1 or self.n_eval_scenes < 1:
            raise ConfigurationError("need at least one train and one eval scene")
        if any(s < 0 for s in self.sigmas):
            raise ConfigurationError(f"sigma levels must be non-negative, got {self.sigmas}")
        if self.delta < 0:
            raise ConfigurationError(f"delta must be non-negative, got {self.delta}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigurationError(f"unknown mode {m!r}; expected subset of {MODES}")
        return self

    def digest(self) -> str:
        return hashlib.blake2s(repr(self).encode("utf-8"), digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# training


@dataclass
class ExperimentArtifacts:
    protocol_model: AgentModel
    agent_models: Dict[int, AgentModel]
    pairs: Dict[int, AdapterReverterPair]
    curves: Dict[str, List[float]]


def train_all(cfg: ExperimentConfig) -> ExperimentArtifacts:
    """Protocol first, then every agent, then every pair."""
    cfg.validate()
    scenes = make_dataset(cfg.n_train_scenes, len(cfg.agents), cfg.seed, "train", cfg.world)
    curves: Dict[str, List[float]] = {}
    protocol_model, curve = train_protocol(cfg.protocol, scenes, cfg.cfa)
    curves["protocol"] = curve
    agent_models: Dict[int, AgentModel] = {}
    pairs: Dict[int, AdapterReverterPair] = {}
    for spec in cfg.agents:
        model, curve = train_agent_local(spec, scenes, cfg.cfa)
        agent_models[spec.agent_id] = model
        curves[f"agent_{spec.agent_id}"] = curve
    for spec in cfg.agents:
        pair, curve = train_cfa_pair(
            agent_models[spec.agent_id], protocol_model, scenes, cfg.cfa,
            protocol_spec=cfg.protocol,
        )
        pairs[spec.agent_id] = pair
        curves[f"pair_{spec.agent_id}"] = curve
    return ExperimentArtifacts(protocol_model, agent_models, pairs, curves)


def save_artifacts(artifacts: ExperimentArtifacts, out_dir) -> List[str]:
    """One checkpoint file per trained component; returns the file names."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, store):
        path = os.path.join(out_dir, name)
        save_checkpoint(store, path)
        written.append(name)

    put("protocol.ckpt", artifacts.protocol_model.params)
    for aid in sorted(artifacts.agent_models):
        put(f"agent_{aid}.ckpt", artifacts.agent_models[aid].params)
    for aid in sorted(artifacts.pairs):
        put(f"pair_{aid}.ckpt", artifacts.pairs[aid].params)
    with open(os.path.join(out_dir, "curves.json"), "w") as fh:
        json.dump(artifacts.curves, fh, sort_keys=True, indent=0)
    written.append("curves.json")
    return written


def load_artifacts(cfg: ExperimentConfig, out_dir) -> ExperimentArtifacts:
    """Rebuild models from specs and restore their checkpoints."""
    import os

    protocol_model = AgentModel(cfg.protocol.agent_spec(), seed=cfg.cfa.seed)
    restore_params(protocol_model.params, load_checkpoint(os.path.join(out_dir, "protocol.ckpt")))
    agent_models, pairs = {}, {}
    for spec in cfg.agents:
        model = AgentModel(spec, seed=cfg.cfa.seed)
        restore_params(model.params, load_checkpoint(os.path.join(out_dir, f"agent_{spec.agent_id}.ckpt")))
        agent_models[spec.agent_id] = model
        pair = AdapterReverterPair(
            spec, cfg.protocol, c_hidden=cfg.cfa.c_hidden,
            n_blocks=cfg.cfa.n_blocks, block_kind=cfg.cfa.block_kind, seed=cfg.cfa.seed,
        )
        restore_params(pair.params, load_checkpoint(os.path.join(out_dir, f"pair_{spec.agent_id}.ckpt")))
        pairs[spec.agent_id] = pair
    curves_path = os.path.join(out_dir, "curves.json")
    curves = {}
    if os.path.exists(curves_path):
        with open(curves_path) as fh:
            curves = json.load(fh)
    return ExperimentArtifacts(protocol_model, agent_models, pairs, curves)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricCell:
    agent_id: int
    task: str
    mode: str
    sigma: float  # in cell units
    metric: str
    value: float
    n_scenes: int
    delta_vs_non_collab: float


@dataclass
class MetricsReport:
    seed: int
    sigma_cell_m: float
    n_eval_scenes: int
    config_digest: str
    cells: Tuple[MetricCell, ...]

    def value(self, agent_id: int, mode: str, sigma: float) -> float:
        for c in self.cells:
            if c.agent_id == agent_id and c.mode == mode and c.sigma == sigma:
                return c.value
        raise KeyError(f"no cell for agent {agent_id}, mode {mode!r}, sigma {sigma}")


def _metric_name(task: str) -> str:
    return "ap50" if task == "detection" else "miou"


def evaluate(
    cfg: ExperimentConfig, artifacts: ExperimentArtifacts, workers: int = 1
) -> MetricsReport:
    cfg.validate()
    if workers < 1:
        raise ConfigurationError(f"need at least one worker, got {workers}")
    scenes = make_dataset(cfg.n_eval_scenes, len(cfg.agents), cfg.seed, "eval", cfg.world)
    models = [artifacts.agent_models[s.agent_id] for s in cfg.agents]
    pairs = artifacts.pairs

    jobs = [(sigma, s_idx, scene) for sigma in cfg.sigmas for s_idx, scene in enumerate(scenes)]

    def run_cell(job):
        sigma, s_idx, scene = job
        rnd = make_round(
            scene.world, cfg.agents, scene.poses, cfg.delta,
            sigma * cfg.sigma_cell_m, cfg.seed, s_idx,
        )
        return {mode: run_round(rnd, models, pairs, mode, cfg.world) for mode in cfg.modes}

    # cells are independent; assembly below is single-writer in job order,
    # so the report is identical whatever the worker count
    if workers == 1:
        cell_results = [run_cell(j) for j in jobs]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            cell_results = list(pool.map(run_cell, jobs))

    # per (agent, mode, sigma): detection gathers (pred, gt) pairs, seg gathers ious
    det_pool: Dict[Tuple[int, str, float], list] = {}
    seg_pool: Dict[Tuple[int, str, float], list] = {}
    for (sigma, s_idx, scene), per_mode in zip(jobs, cell_results):
        for mode, results in per_mode.items():
            for spec in cfg.agents:
                res = results[spec.agent_id]
                key = (spec.agent_id, mode, sigma)
                if spec.task == "detection":
                    det_pool.setdefault(key, []).append((res.boxes, res.ground_truth.boxes))
                else:
                    mask = segmentation_mask(res.output)
                    seg_pool.setdefault(key, []).append(
                        mean_iou(mask, res.ground_truth.mask)
                    )
    values: Dict[Tuple[int, str, float], float] = {}
    for key, pool in det_pool.items():
        values[key] = pooled_average_precision(pool)
    for key, ious in seg_pool.items():
        values[key] = float(np.mean(ious))
    cells = []
    for spec in cfg.agents:
        for mode in cfg.modes:
            for sigma in cfg.sigmas:
                v = values[(spec.agent_id, mode, sigma)]
                if not 0.0 <= v <= 1.0:
                    raise TrainingError(f"metric out of range for {spec.agent_id}/{mode}: {v}")
                base = values.get((spec.agent_id, "non_collab", sigma))
                cells.append(
                    MetricCell(
                        agent_id=spec.agent_id,
                        task=spec.task,
                        mode=mode,
                        sigma=sigma,
                        metric=_metric_name(spec.task),
                        value=v,
                        n_scenes=cfg.n_eval_scenes,
                        delta_vs_non_collab=(v - base) if base is not None else 0.0,
                    )
                )
    return MetricsReport(
        seed=cfg.seed,
        sigma_cell_m=cfg.sigma_cell_m,
        n_eval_scenes=cfg.n_eval_scenes,
        config_digest=cfg.digest(),
        cells=tuple(cells),
    )


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    return evaluate(cfg, train_all(cfg))


# ---------------------------------------------------------------------------
# ablations


def _ablation_eval_config(cfg: ExperimentConfig) -> ExperimentConfig:
    # ablations compare stamp against the fixed baseline at sigma 0
    return replace(cfg, modes=("non_collab", "stamp"), sigmas=(0.0,))


def run_ablation(cfg: ExperimentConfig, axis: str) -> Dict[str, MetricsReport]:
    """One report per level of the chosen axis; everything else held fixed.

    Levels reuse trained components wherever the axis allows: block_kind and
    loss_combo retrain only the pairs; channel_size also retrains the
    protocol model (its shape changes).
    """
    cfg.validate()
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    eval_cfg = _ablation_eval_config(cfg)
    scenes = make_dataset(cfg.n_train_scenes, len(cfg.agents), cfg.seed, "train", cfg.world)
    base = train_all(cfg) if axis != "channel_size" else None
    reports: Dict[str, MetricsReport] = {}
    if axis == "channel_size":
        for c in cfg.channel_sizes:
            level_cfg = replace(eval_cfg, protocol=replace(cfg.protocol, channels=int(c)))
            reports[str(c)] = evaluate(level_cfg, train_all(level_cfg))
        return reports
    for level in cfg.block_kinds if axis == "block_kind" else cfg.loss_combos:
        if axis == "block_kind":
            cfa_cfg = replace(cfg.cfa, block_kind=level)
        else:
            cfa_cfg = cfg.cfa.with_loss_combo(level)
        pairs = {}
        for spec in cfg.agents:
            pair, _ = train_cfa_pair(
                base.agent_models[spec.agent_id], base.protocol_model, scenes, cfa_cfg,
                protocol_spec=cfg.protocol,
            )
            pairs[spec.agent_id] = pair
        swapped = ExperimentArtifacts(
            base.protocol_model, base.agent_models, pairs, base.curves
        )
        reports[level] = evaluate(eval_cfg, swapped)
    return reports


def report_mean(report: MetricsReport, mode: str = "stamp") -> float:
    """Seed-comparable scalar: mean metric over agents for one mode."""
    vals = [c.value for c in report.cells if c.mode == mode]
    if not vals:
        raise PreconditionError(f"report has no cells for mode {mode!r}")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# efficiency accounting


@dataclass(frozen=True)
class EfficiencyRow:
    mode: str
    n_agents: int
    total_params: int
    marginal_params: int
    cumulative_steps: int
    marginal_steps: int


@dataclass
class EfficiencyReport:
    rows: Tuple[EfficiencyRow, ...]
    agent_params: int
    encoder_params: int
    pair_params: int
    protocol_params: int
    reference_gpu_hours: Dict[str, float]

    def rows_for(self, mode: str) -> List[EfficiencyRow]:
        return [r for r in self.rows if r.mode == mode]


def _count(store: nm.ParamStore, prefix: str = "") -> int:
    return sum(g.size for n, g in store.items() if n.startswith(prefix))


def efficiency_report(
    agent_spec: AgentSpec,
    protocol_spec: ProtocolSpec,
    cfg: CfaTrainConfig,
    n_max: int,
) -> EfficiencyReport:
    """Analytic parameter/step accounting for fleets of 1..n_max agents.

    The fleet is n clones of one spec so marginal columns are directly
    comparable.  Three onboarding strategies:

    * stamp — protocol trained once; each agent adds only its pair
      (epochs_cfa budget).
    * e2e — the whole fleet retrains jointly at size n with an
      epochs-scale-with-n rule, so cumulative steps grow quadratically.
    * shared_core — each added agent retrains its encoder against the
      first agent's frozen fusion/decoder.
    """
    if n_max < 1:
        raise PreconditionError(f"need n_max >= 1, got {n_max}")
    cfg.validate()
    model = AgentModel(agent_spec.validate(), seed=0)
    pair = AdapterReverterPair(
        agent_spec, protocol_spec, c_hidden=cfg.c_hidden,
        n_blocks=cfg.n_blocks, block_kind=cfg.block_kind, seed=0,
    )
    protocol_model = AgentModel(protocol_spec.validate().agent_spec(), seed=0)
    agent_params = model.params.total_params()
    encoder_params = _count(model.params, "encoder.")
    pair_params = pair.param_count
    protocol_params = protocol_model.params.total_params()

    spe = cfg.scenes_per_epoch
    local_steps = cfg.epochs_local * spe
    pair_steps = cfg.epochs_cfa * max(1, -(-cfg.cfa_scenes_per_epoch // cfg.batch_k))

    rows: List[EfficiencyRow] = []
    e2e_cum = 0
    for n in range(1, n_max + 1):
        rows.append(
            EfficiencyRow(
                mode="stamp", n_agents=n,
                total_params=protocol_params + n * pair_params,
                marginal_params=pair_params,
                cumulative_steps=local_steps + n * pair_steps,
                marginal_steps=pair_steps,
            )
        )
        e2e_cum += cfg.epochs_local * n * spe  # joint retrain at every size
        rows.append(
            EfficiencyRow(
                mode="e2e", n_agents=n,
                total_params=n * agent_params,
                marginal_params=agent_params,
                cumulative_steps=e2e_cum,
                marginal_steps=cfg.epochs_local * n * spe,
            )
        )
        rows.append(
            EfficiencyRow(
                mode="shared_core", n_agents=n,
                total_params=agent_params + (n - 1) * encoder_params,
                marginal_params=encoder_params if n > 1 else agent_params,
                cumulative_steps=n * local_steps,
                marginal_steps=local_steps,
            )
        )
    return EfficiencyReport(
        rows=tuple(rows),
        agent_params=agent_params,
        encoder_params=encoder_params,
        pair_params=pair_params,
        protocol_params=protocol_params,
        reference_gpu_hours=dict(REFERENCE_GPU_HOURS),
    )


# ---------------------------------------------------------------------------
# functional baselines (small-scale honesty checks for the accounting above)


def _grads_or_zero(store: nm.ParamStore) -> Dict[str, np.ndarray]:
    return {
        name: (g.grad if g.grad is not None else np.zeros_like(g.values))
        for name, g in store.items()
    }


def train_e2e(
    specs: Sequence[AgentSpec],
    dataset: Sequence[TrainScene],
    cfg: CfaTrainConfig,
    delta: float = 1e9,
) -> Tuple[List[AgentModel], List[float]]:
    """Joint training of the whole fleet with plain feature exchange.

    Foreign features are bridged (resize + channel pad/cut) straight into
    the rotating ego's fusion — no protocol domain, no pairs — and every
    model updates at every step.  The step budget scales with fleet size,
    which is exactly why this baseline gets expensive.
    """
    if not dataset:
        raise PreconditionError("training needs at least one scene")
    cfg.validate()
    models = [AgentModel(s.validate(), seed=cfg.seed) for s in specs]
    total = cfg.epochs_local * len(specs) * cfg.scenes_per_epoch
    losses: List[float] = []
    for step in range(total):
        scene = dataset[step % len(dataset)]
        poses = scene.poses[: len(models)]
        if len(poses) < len(models):
            raise PreconditionError(
                f"scene has {len(scene.poses)} poses for {len(models)} agents"
            )
        rnd = CollabRound(
            world=scene.world,
            specs=tuple(m.spec for m in models),
            true_poses=tuple(poses),
            reported_poses=tuple(poses),
            delta=delta,
        )
        ego = step % len(models)
        feats = [
            m.encode(render_frame(scene.world, p, m.spec.modality, scene.world_config).grid)
            for m, p in zip(models, poses)
        ]
        contribs, _ = gather_contributions(
            rnd, ego, feats, "collab_no_cfa", through_messages=False
        )
        gt = make_ground_truth(
            scene.world, poses[ego], models[ego].spec.task, scene.world_config
        )
        loss = task_loss(models[ego].decode(models[ego].fuse(contribs, 0)), gt, models[ego].spec)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"e2e loss became non-finite at step {step}")
        losses.append(value)
        for m in models:
            m.params.zero_grads()
        loss.backward()
        lr = cfg.lr_local
        for m in models:
            nm.adam_step(m.params, _grads_or_zero(m.params), lr)
    return models, losses


def train_shared_core_agent(
    new_spec: AgentSpec,
    base_model: AgentModel,
    dataset: Sequence[TrainScene],
    cfg: CfaTrainConfig,
) -> Tuple[AgentModel, List[float]]:
    """Onboard an agent by retraining only its encoder against a fixed core.

    The new agent inherits the base model's fusion and decoder parameters
    (which stay frozen and bitwise unchanged); only encoder weights train.
    Requires the new spec to share the base model's feature/head geometry.
    """
    if not dataset:
        raise PreconditionError("training needs at least one scene")
    cfg.validate()
    base_spec = base_model.spec
    for field in ("channels", "feature_resolution", "head_width", "task", "fusion", "out_raster"):
        if getattr(new_spec, field) != getattr(base_spec, field):
            raise ConfigurationError(
                f"shared-core onboarding needs matching {field}: "
                f"{getattr(new_spec, field)} vs {getattr(base_spec, field)}"
            )
    model = AgentModel(new_spec.validate(), seed=cfg.seed)
    shared = [n for n in model.params.names() if not n.startswith("encoder.")]
    for name in shared:
        model.params[name].values[...] = base_model.params[name].values
        model.params[name].requires_grad = False
    total = cfg.epochs_local * cfg.scenes_per_epoch
    losses: List[float] = []
    spec = model.spec
    for step in range(total):
        scene = dataset[step % len(dataset)]
        pose = scene.poses[step % len(scene.poses)]
        feat = model.encode(
            render_frame(scene.world, pose, spec.modality, scene.world_config).grid
        )
        gt = make_ground_truth(scene.world, pose, spec.task, scene.world_config)
        loss = task_loss(model.decode(model.fuse([feat], 0)), gt, spec)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"shared-core loss became non-finite at step {step}")
        losses.append(value)
        model.params.zero_grads()
        loss.backward()
        nm.adam_step(model.params, _grads_or_zero(model.params), cfg.lr_local)
    return model, losses


# ---------------------------------------------------------------------------
# report rendering


def _f32_text(value: float) -> str:
    """Shortest decimal that round-trips through float32."""
    return np.format_float_positional(np.float32(value), unique=True, trim="0")


CSV_HEADER = "agent_id,task,mode,sigma,metric,value,n_scenes,delta_vs_non_collab"


def render_csv(report: MetricsReport) -> str:
    lines = [CSV_HEADER]
    for c in report.cells:
        lines.append(
            ",".join(
                [
                    str(c.agent_id), c.task, c.mode, _f32_text(c.sigma), c.metric,
                    _f32_text(c.value), str(c.n_scenes), _f32_text(c.delta_vs_non_collab),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> List[MetricCell]:
    lines = [l for l in text.strip().splitlines() if l]
    if lines[:1] != [CSV_HEADER]:
        raise ConfigurationError("metrics csv is missing its header line")
    cells = []
    for line in lines[1:]:
        aid, task, mode, sigma, metric, value, n, delta = line.split(",")
        cells.append(
            MetricCell(
                agent_id=int(aid), task=task, mode=mode, sigma=float(sigma),
                metric=metric, value=float(value), n_scenes=int(n),
                delta_vs_non_collab=float(delta),
            )
        )
    return cells


def render_json(report: MetricsReport) -> str:
    payload = {
        "seed": report.seed,
        "sigma_cell_m": report.sigma_cell_m,
        "n_eval_scenes": report.n_eval_scenes,
        "config_digest": report.config_digest,
        "cells": [
            {
                "agent_id": c.agent_id, "task": c.task, "mode": c.mode,
                "sigma": float(_f32_text(c.sigma)), "metric": c.metric,
                "value": float(_f32_text(c.value)), "n_scenes": c.n_scenes,
                "delta_vs_non_collab": float(_f32_text(c.delta_vs_non_collab)),
            }
            for c in report.cells
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def report_from_json(text: str) -> MetricsReport:
    """Inverse of render_json; values survive because they were f32-rounded."""
    try:
        payload = json.loads(text)
        cells = tuple(
            MetricCell(
                agent_id=int(c["agent_id"]), task=c["task"], mode=c["mode"],
                sigma=float(c["sigma"]), metric=c["metric"], value=float(c["value"]),
                n_scenes=int(c["n_scenes"]),
                delta_vs_non_collab=float(c["delta_vs_non_collab"]),
            )
            for c in payload["cells"]
        )
        return MetricsReport(
            seed=int(payload["seed"]),
            sigma_cell_m=float(payload["sigma_cell_m"]),
            n_eval_scenes=int(payload["n_eval_scenes"]),
            config_digest=payload["config_digest"],
            cells=cells,
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"metrics json is malformed: {exc}") from None


def _ascii_curve(points: Sequence[Tuple[float, float]], width: int = 41) -> List[str]:
    """One line per point: x label, bar scaled to [0, 1], y value."""
    lines = []
    for x, y in points:
        filled = int(round(max(0.0, min(1.0, y)) * (width - 1)))
        bar = "#" * filled + "." * (width - 1 - filled)
        lines.append(f"  {x:>6.2f} |{bar}| {_f32_text(y)}")
    return lines


def render_sigma_curves(report: MetricsReport) -> str:
    """Metric vs sigma, one block per (agent, mode)."""
    out = [
        f"metric vs pose-noise sigma (cell unit = {report.sigma_cell_m} m)",
        "",
    ]
    seen = []
    for c in report.cells:
        key = (c.agent_id, c.mode)
        if key not in seen:
            seen.append(key)
    for agent_id, mode in seen:
        pts = [
            (c.sigma, c.value)
            for c in report.cells
            if c.agent_id == agent_id and c.mode == mode
        ]
        head = next(c for c in report.cells if c.agent_id == agent_id and c.mode == mode)
        out.append(f"agent {agent_id} [{head.task}/{head.metric}] mode={mode}")
        out.extend(_ascii_curve(sorted(pts)))
        out.append("")
    return "\n".join(out) + "\n"


def render_level_curve(reports: Mapping[str, MetricsReport], axis: str) -> str:
    """Mean stamp metric vs ablation level (e.g. metric-vs-channel)."""
    out = [f"mean stamp metric vs {axis}", ""]
    pts = []
    for level, report in reports.items():
        pts.append((level, report_mean(report, "stamp")))
    for level, value in pts:
        filled = int(round(max(0.0, min(1.0, value)) * 40))
        bar = "#" * filled + "." * (40 - filled)
        out.append(f"  {level:>14} |{bar}| {_f32_text(value)}")
    out.append("")
    return "\n".join(out) + "\n"


def write_pgm(values: np.ndarray, path) -> None:
    """Grayscale P2 dump of a 2D array, min..max stretched to 0..255."""
    if values.ndim != 2:
        raise ConfigurationError(f"pgm dump needs a 2D array, got shape {values.shape}")
    v = values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        img = np.round((v - lo) / (hi - lo) * 255.0).astype(np.int64)
    else:
        img = np.zeros(v.shape, dtype=np.int64)
    lines = [f"P2", f"{v.shape[1]} {v.shape[0]}", "255"]
    for row in img:
        lines.append(" ".join(str(int(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def feature_map_image(feature: nm.Grid) -> np.ndarray:
    """Channel-mean view of a (1, C, H, W) feature grid."""
    return feature.values[0].mean(axis=0)


def render_report(
    report: MetricsReport,
    out_dir,
    feature_maps: Optional[Mapping[str, nm.Grid]] = None,
) -> List[str]:
    """Write csv / json / ascii-curve files (and optional graymap dumps)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text)
        written.append(name)

    put("metrics.csv", render_csv(report))
    put("metrics.json", render_json(report))
    put("curves.txt", render_sigma_curves(report))
    put(
        "manifest.txt",
        "\n".join(
            [
                f"config_digest: {report.config_digest}",
                f"seed: {report.seed}",
                f"sigma_cell_m: {report.sigma_cell_m}",
                f"n_eval_scenes: {report.n_eval_scenes}",
                f"cells: {len(report.cells)}",
            ]
        )
        + "\n",
    )
    for name in sorted(feature_maps or {}):
        fname = f"feature_{name}.pgm"
        write_pgm(feature_map_image(feature_maps[name]), os.path.join(out_dir, fname))
        written.append(fname)
    return written


def render_ablation(reports: Mapping[str, MetricsReport], axis: str, out_dir) -> List[str]:
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for level in reports:
        sub = os.path.join(out_dir, f"{axis}_{level}")
        for name in render_report(reports[level], sub):
            written.append(f"{axis}_{level}/{name}")
    path = os.path.join(out_dir, f"ablation_{axis}.txt")
    with open(path, "w") as fh:
        fh.write(render_level_curve(reports, axis))
    written.append(f"ablation_{axis}.txt")
    return written


def render_efficiency(report: EfficiencyReport, out_dir) -> List[str]:
    import os

    os.makedirs(out_dir, exist_ok=True)
    lines = ["mode,n_agents,total_params,marginal_params,cumulative_steps,marginal_steps"]
    for r in report.rows:
        lines.append(
            f"{r.mode},{r.n_agents},{r.total_params},{r.marginal_params},"
            f"{r.cumulative_steps},{r.marginal_steps}"
        )
    lines.append("")
    lines.append(f"# agent_params: {report.agent_params}")
    lines.append(f"# encoder_params: {report.encoder_params}")
    lines.append(f"# pair_params: {report.pair_params}")
    lines.append(f"# protocol_params: {report.protocol_params}")
    for key in sorted(report.reference_gpu_hours):
        lines.append(f"# reference_gpu_hours[{key}]: {report.reference_gpu_hours[key]}")
    with open(os.path.join(out_dir, "efficiency.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return ["efficiency.csv"]
