"""Experiment configuration: INI files with one section per component.

Example::

    [experiment]
    model = inventory

    [inventory]
    theta = 8
    kappa = 5

    [simulation]
    n_rollouts = 10000
    x0 = 4, 8, 12

Keys that no section declares are rejected rather than ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .gated_queue import QueueParams
from .inventory import InventoryParams

MODELS = ("inventory", "gated-queue")
PRESETS = ("paper-v-c", "gated-default")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 500
    threads: int = 0  # 0 = use CTMDP_THREADS or 1
    queue_states: int | None = None


@dataclass(frozen=True)
class SimulationConfig:
    n_rollouts: int = 10000
    horizon: float = 60.0
    seed: int = 2024
    x0: tuple[int, ...] = (4, 8, 12)
    trace_x0: int | None = None
    n_cycles: int = 50

    def __post_init__(self):
        if self.n_rollouts < 2:
            raise ValueError("n_rollouts must be >= 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "inventory"
    inventory: InventoryParams = field(default_factory=InventoryParams)
    queue: QueueParams = field(default_factory=QueueParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    out: str = "out"

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        try:
            updated = dataclasses.replace(getattr(self, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
        return dataclasses.replace(self, **{section: updated})


_SECTIONS = {
    "inventory": InventoryParams,
    "queue": QueueParams,
    "solver": SolverConfig,
    "simulation": SimulationConfig,
}


def _convert(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if raw.lower() in ("", "none"):
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _convert(raw, inner, key)
    if origin is tuple:
        return tuple(_convert(part, args[0], key) for part in raw.split(",") if part.strip())
    try:
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is bool:
            return raw.lower() in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from exc
    return raw


def _section_values(cls, items: dict[str, str], section: str) -> dict:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(items) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return {k: _convert(v, hints[k], f"{section}.{k}") for k, v in items.items()}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T_min)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base or ExperimentConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "experiment":
            extra = sorted(set(items) - {"model"})
            if extra:
                raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(extra)}")
            if "model" in items:
                cfg = dataclasses.replace(cfg, model=items["model"].strip())
        elif section == "output":
            extra = sorted(set(items) - {"dir"})
            if extra:
                raise ConfigError(f"unknown key(s) in [output]: {', '.join(extra)}")
            if "dir" in items:
                cfg = dataclasses.replace(cfg, out=items["dir"].strip())
        elif section in _SECTIONS:
            cfg = cfg.replace(section, **_section_values(_SECTIONS[section], items, section))
        else:
            raise ConfigError(f"unknown section [{section}]")
    validate(cfg)
    return cfg


def apply_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``section.key=value`` on top of ``cfg``."""
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    lhs, raw = assignment.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return parse_config(f"[{section}]\n{key} = {raw}\n", base=cfg)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.model not in MODELS:
        raise ConfigError(f"experiment.model must be one of {MODELS}, got {cfg.model!r}")
    if cfg.model == "inventory":
        lo, hi = cfg.inventory.window
        if hi < lo:
            raise ConfigError("inventory window is empty")
    if cfg.solver.queue_states is not None and cfg.solver.queue_states < 1:
        raise ConfigError("solver.queue_states must be >= 1 (empty window)")
    if cfg.solver.max_iter < 1:
        raise ConfigError("solver.max_iter must be >= 1")


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("ctmdp").joinpath("presets", f"{name}.ini").read_text()
    return parse_config(text)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)
