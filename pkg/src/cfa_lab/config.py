"""Plain-text run configs.

INI-style sections map onto the experiment dataclasses: [world],
[protocol], [cfa], [experiment], and one [agents.N] per collaborator.
Unknown sections and keys are rejected rather than ignored — a typo
silently falling back to a default would invalidate a run.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from typing import Tuple, get_args, get_origin, get_type_hints

from .cfa import CfaTrainConfig, ProtocolSpec
from .errors import ConfigurationError
from .harness import ExperimentConfig
from .models import AgentSpec
from .world import WorldConfig

AGENT_SECTION_PREFIX = "agents."
KNOWN_SECTIONS = ("world", "protocol", "cfa", "experiment")

# every agent section must pin these; the rest fall back to spec defaults
AGENT_REQUIRED_KEYS = ("modality", "task", "channels", "resolution", "fusion")
_AGENT_ALIASES = {"resolution": "feature_resolution"}


def _scalar(raw: str, kind, key: str, section: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigurationError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}"
        ) from None
    raise ConfigurationError(f"[{section}] {key}: unsupported option type {kind!r}")


def _coerce(raw: str, annotation, key: str, section: str):
    if get_origin(annotation) in (tuple, Tuple):
        args = get_args(annotation)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_scalar(p, args[0], key, section) for p in parts)
        if len(parts) != len(args):
            raise ConfigurationError(
                f"[{section}] {key}: expected {len(args)} comma-separated values, got {len(parts)}"
            )
        return tuple(_scalar(p, a, key, section) for p, a in zip(parts, args))
    return _scalar(raw, annotation, key, section)


def _fill(dc_type, base, items, section: str, aliases=None, exclude=()):
    """Overlay parsed key = value pairs onto a dataclass instance."""
    hints = get_type_hints(dc_type)
    allowed = {f.name for f in fields(dc_type)} - set(exclude)
    updates = {}
    for key, raw in items:
        name = (aliases or {}).get(key, key)
        if name not in allowed:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        updates[name] = _coerce(raw, hints[name], key, section)
    return replace(base, **updates)


def _parse_agent(section: str, items) -> AgentSpec:
    suffix = section[len(AGENT_SECTION_PREFIX):]
    try:
        agent_id = int(suffix)
    except ValueError:
        raise ConfigurationError(
            f"agent section [{section}] needs a numeric id after {AGENT_SECTION_PREFIX!r}"
        ) from None
    if agent_id < 1:
        raise ConfigurationError(f"agent section [{section}]: id must be >= 1")
    present = {key for key, _ in items}
    missing = [k for k in AGENT_REQUIRED_KEYS if k not in present]
    if missing:
        raise ConfigurationError(f"agent section [{section}] must set {', '.join(missing)}")
    return _fill(
        AgentSpec, AgentSpec(agent_id=agent_id), items, section,
        aliases=_AGENT_ALIASES, exclude=("agent_id",),
    )


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # option names are case-sensitive identifiers
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config is not valid INI text: {exc}") from None

    agents = []
    for section in parser.sections():
        if section.startswith(AGENT_SECTION_PREFIX):
            agents.append(_parse_agent(section, parser.items(section)))
        elif section not in KNOWN_SECTIONS:
            raise ConfigurationError(
                f"unknown section [{section}]; expected {KNOWN_SECTIONS} or {AGENT_SECTION_PREFIX}N"
            )

    def items(section):
        return parser.items(section) if parser.has_section(section) else []

    world = _fill(WorldConfig, WorldConfig(), items("world"), "world")
    protocol = _fill(ProtocolSpec, ProtocolSpec(), items("protocol"), "protocol")
    cfa = _fill(CfaTrainConfig, CfaTrainConfig(), items("cfa"), "cfa")
    base = ExperimentConfig(
        agents=tuple(agents), protocol=protocol, cfa=cfa, world=world
    )
    cfg = _fill(
        ExperimentConfig, base, items("experiment"), "experiment",
        exclude=("agents", "protocol", "cfa", "world"),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text)
