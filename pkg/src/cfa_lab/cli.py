"""Command-line front end.

One command per pipeline stage, driven by a plain-text config file:

    cfa-lab gen-data        --out runs/demo
    cfa-lab train-protocol  --out runs/demo
    cfa-lab train-agent 1   --out runs/demo
    cfa-lab train-cfa 1     --out runs/demo
    cfa-lab eval            --out runs/demo
    cfa-lab ablate block_kind --out runs/demo
    cfa-lab report          --out runs/demo

Stages communicate only through files in the artifact directory, so each
command is idempotent: rerunning it with unchanged inputs rewrites byte-
identical artifacts.  A missing prerequisite fails fast with the command
that would produce it.  CFA_LAB_THREADS caps evaluation workers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

from .cfa import make_dataset, train_agent_local, train_cfa_pair, train_protocol
from .config import load_config
from .errors import (
    CheckpointError,
    ConfigurationError,
    DependencyError,
    DimensionError,
    GenerationError,
    NumericError,
    PreconditionError,
    ProtocolError,
    TrainingError,
)
from .harness import (
    ABLATION_AXES,
    AdapterReverterPair,
    ExperimentArtifacts,
    ExperimentConfig,
    efficiency_report,
    evaluate,
    render_ablation,
    render_efficiency,
    render_report,
    report_from_json,
    run_ablation,
)
from .models import AgentModel
from .pipeline import load_checkpoint, restore_params, save_checkpoint

_HANDLED = (
    ConfigurationError,
    DependencyError,
    DimensionError,
    PreconditionError,
    ProtocolError,
    CheckpointError,
    TrainingError,
    GenerationError,
    NumericError,
    OSError,
)


# ---------------------------------------------------------------------------
# artifact bookkeeping


def _path(out: str, name: str) -> str:
    return os.path.join(out, name)


def _require(out: str, name: str, producer: str) -> str:
    path = _path(out, name)
    if not os.path.exists(path):
        raise DependencyError(f"missing {name} in {out}; run `cfa-lab {producer}` first")
    return path


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _scene_digest(scene) -> str:
    h = hashlib.blake2s(digest_size=8)
    h.update(scene.world.layout.tobytes())
    for p in scene.poses:
        h.update(f"{p.x!r},{p.y!r},{p.yaw!r};".encode())
    return h.hexdigest()


def _agent_spec(cfg: ExperimentConfig, agent_id: int):
    for spec in cfg.agents:
        if spec.agent_id == agent_id:
            return spec
    have = [a.agent_id for a in cfg.agents]
    raise ConfigurationError(f"no agent with id {agent_id} in the roster; have {have}")


def _load_model(cfg: ExperimentConfig, spec, ckpt_path: str) -> AgentModel:
    model = AgentModel(spec, seed=cfg.cfa.seed)
    restore_params(model.params, load_checkpoint(ckpt_path))
    return model


def _load_pair(cfg: ExperimentConfig, spec, ckpt_path: str) -> AdapterReverterPair:
    pair = AdapterReverterPair(
        spec, cfg.protocol, c_hidden=cfg.cfa.c_hidden,
        n_blocks=cfg.cfa.n_blocks, block_kind=cfg.cfa.block_kind, seed=cfg.cfa.seed,
    )
    restore_params(pair.params, load_checkpoint(ckpt_path))
    return pair


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out: str) -> str:
    train = make_dataset(cfg.n_train_scenes, len(cfg.agents), cfg.seed, "train", cfg.world)
    eval_ = make_dataset(cfg.n_eval_scenes, len(cfg.agents), cfg.seed, "eval", cfg.world)
    _write_json(
        _path(out, "dataset.json"),
        {
            "seed": cfg.seed,
            "n_train_scenes": cfg.n_train_scenes,
            "n_eval_scenes": cfg.n_eval_scenes,
            "train_digests": [_scene_digest(s) for s in train],
            "eval_digests": [_scene_digest(s) for s in eval_],
        },
    )
    return f"gen-data: wrote dataset.json ({len(train)} train + {len(eval_)} eval scenes)"


def cmd_train_protocol(cfg: ExperimentConfig, out: str) -> str:
    _require(out, "dataset.json", "gen-data")
    scenes = make_dataset(cfg.n_train_scenes, len(cfg.agents), cfg.seed, "train", cfg.world)
    model, curve = train_protocol(cfg.protocol, scenes, cfg.cfa)
    save_checkpoint(model.params, _path(out, "protocol.ckpt"))
    _write_json(_path(out, "curve_protocol.json"), curve)
    return f"train-protocol: wrote protocol.ckpt ({model.params.total_params()} params, {len(curve)} steps)"


def cmd_train_agent(cfg: ExperimentConfig, out: str, agent_id: int) -> str:
    _require(out, "dataset.json", "gen-data")
    spec = _agent_spec(cfg, agent_id)
    scenes = make_dataset(cfg.n_train_scenes, len(cfg.agents), cfg.seed, "train", cfg.world)
    model, curve = train_agent_local(spec, scenes, cfg.cfa)
    save_checkpoint(model.params, _path(out, f"agent_{agent_id}.ckpt"))
    _write_json(_path(out, f"curve_agent_{agent_id}.json"), curve)
    return (
        f"train-agent: wrote agent_{agent_id}.ckpt "
        f"({model.params.total_params()} params, {len(curve)} steps)"
    )


def cmd_train_cfa(cfg: ExperimentConfig, out: str, agent_id: int) -> str:
    spec = _agent_spec(cfg, agent_id)
    protocol_path = _require(out, "protocol.ckpt", "train-protocol")
    agent_path = _require(out, f"agent_{agent_id}.ckpt", f"train-agent {agent_id}")
    protocol_model = _load_model(cfg, cfg.protocol.agent_spec(), protocol_path)
    agent_model = _load_model(cfg, spec, agent_path)
    scenes = make_dataset(cfg.n_train_scenes, len(cfg.agents), cfg.seed, "train", cfg.world)
    pair, curve = train_cfa_pair(
        agent_model, protocol_model, scenes, cfg.cfa, protocol_spec=cfg.protocol
    )
    save_checkpoint(pair.params, _path(out, f"pair_{agent_id}.ckpt"))
    _write_json(_path(out, f"curve_pair_{agent_id}.json"), curve)
    return (
        f"train-cfa: wrote pair_{agent_id}.ckpt "
        f"({pair.param_count} params, {len(curve)} steps)"
    )


def cmd_eval(cfg: ExperimentConfig, out: str, workers: int) -> str:
    agent_models = {}
    for spec in cfg.agents:
        path = _require(out, f"agent_{spec.agent_id}.ckpt", f"train-agent {spec.agent_id}")
        agent_models[spec.agent_id] = _load_model(cfg, spec, path)
    pairs = {}
    if "stamp" in cfg.modes:
        for spec in cfg.agents:
            path = _require(out, f"pair_{spec.agent_id}.ckpt", f"train-cfa {spec.agent_id}")
            pairs[spec.agent_id] = _load_pair(cfg, spec, path)
    protocol_path = _path(out, "protocol.ckpt")
    if os.path.exists(protocol_path):
        protocol_model = _load_model(cfg, cfg.protocol.agent_spec(), protocol_path)
    else:
        protocol_model = AgentModel(cfg.protocol.agent_spec(), seed=cfg.cfa.seed)
    artifacts = ExperimentArtifacts(protocol_model, agent_models, pairs, {})
    report = evaluate(cfg, artifacts, workers=workers)
    files = render_report(report, out)
    return f"eval: wrote {', '.join(files)} ({len(report.cells)} cells)"


def cmd_ablate(cfg: ExperimentConfig, out: str, axis: str) -> str:
    _require(out, "dataset.json", "gen-data")
    reports = run_ablation(cfg, axis)
    files = render_ablation(reports, axis, out)
    return f"ablate: wrote {len(files)} files for axis {axis} ({len(reports)} levels)"


def cmd_report(cfg: ExperimentConfig, out: str) -> str:
    metrics_path = _require(out, "metrics.json", "eval")
    with open(metrics_path, "r", encoding="utf-8") as fh:
        report = report_from_json(fh.read())
    files = render_report(report, out)
    eff = efficiency_report(cfg.agents[0], cfg.protocol, cfg.cfa, n_max=8)
    files += render_efficiency(eff, out)
    return f"report: wrote {', '.join(files)}"


# ---------------------------------------------------------------------------
# argument handling


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run config file (INI)")
    common.add_argument("--seed", type=int, metavar="U64",
                        help="override every seed in the config")
    common.add_argument("--out", metavar="DIR", default="artifacts",
                        help="artifact directory (default: artifacts)")
    common.add_argument("--mode", metavar="NAME",
                        help="restrict evaluation to one fusion mode")
    common.add_argument("--sigma", type=float, metavar="F32",
                        help="restrict evaluation to one pose-noise level (cells)")

    parser = argparse.ArgumentParser(
        prog="cfa-lab",
        description="Heterogeneous collaborative perception experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the scene manifest")
    sub.add_parser("train-protocol", parents=[common], help="train the shared-domain model")
    p = sub.add_parser("train-agent", parents=[common], help="train one agent's local model")
    p.add_argument("agent_id", type=int)
    p = sub.add_parser("train-cfa", parents=[common], help="train one agent's adapter/reverter pair")
    p.add_argument("agent_id", type=int)
    sub.add_parser("eval", parents=[common], help="score every (mode, sigma) cell")
    p = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    p.add_argument("axis", choices=ABLATION_AXES)
    sub.add_parser("report", parents=[common], help="re-render reports from saved metrics")
    return parser


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, cfa=replace(cfg.cfa, seed=args.seed))
    if args.mode is not None:
        cfg = replace(cfg, modes=(args.mode,))
    if args.sigma is not None:
        cfg = replace(cfg, sigmas=(args.sigma,))
    return cfg.validate()


def _worker_cap() -> int:
    raw = os.environ.get("CFA_LAB_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"CFA_LAB_THREADS must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ConfigurationError(f"CFA_LAB_THREADS must be >= 1, got {workers}")
    return workers


def main(argv: Optional[List[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        out = args.out
        os.makedirs(out, exist_ok=True)
        if args.command == "gen-data":
            line = cmd_gen_data(cfg, out)
        elif args.command == "train-protocol":
            line = cmd_train_protocol(cfg, out)
        elif args.command == "train-agent":
            line = cmd_train_agent(cfg, out, args.agent_id)
        elif args.command == "train-cfa":
            line = cmd_train_cfa(cfg, out, args.agent_id)
        elif args.command == "eval":
            line = cmd_eval(cfg, out, _worker_cap())
        elif args.command == "ablate":
            line = cmd_ablate(cfg, out, args.axis)
        else:
            line = cmd_report(cfg, out)
    except _HANDLED as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
