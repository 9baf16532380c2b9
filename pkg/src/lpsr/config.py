"""RunConfig: everything a CLI command needs, serialised as JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .engine import EngineConfig
from .evaluation import GridSpace
from .numerics import ConfigError
from .simulator import SimConfig, SimProblemSpec
from .toymodel import ModelConfig

BACKENDS = ("sim", "toy")


@dataclass(frozen=True)
class ToyProblemSpec:
    n: int = 20
    seed: int = 0
    prompt_len: int = 4
    p_solvable: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int
    backend: str = "sim"
    model: ModelConfig = field(default_factory=ModelConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    problems: SimProblemSpec | ToyProblemSpec = field(default_factory=SimProblemSpec)
    calibration: SimProblemSpec | ToyProblemSpec = field(
        default_factory=lambda: SimProblemSpec(seed=1))
    K: int = 16
    restarts: int = 20
    ortho_threshold: float = 0.95
    basis_path: str | None = None
    output_dir: str = "out"
    # sweep axes; the grid's layers must exist in the backend
    grid: GridSpace = field(default_factory=lambda: GridSpace(l_crit=(2, 3, 4, 5, 6)))
    k_values: tuple[int, ...] = (4, 8, 16, 32)
    depth_values: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        want = SimProblemSpec if self.backend == "sim" else ToyProblemSpec
        for name in ("problems", "calibration"):
            if not isinstance(getattr(self, name), want):
                raise ConfigError(f"{name} must be a {want.__name__} for backend {self.backend!r}")
        if self.K < 1 or self.restarts < 1:
            raise ConfigError("K and restarts must be positive")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        tp = hints[k]
        if dataclasses.is_dataclass(tp):
            v = _build(tp, v)
        elif typing.get_origin(tp) is tuple and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    if "seed" not in data:
        raise ConfigError("config must set 'seed' explicitly")
    backend = data.get("backend", "sim")
    spec_cls = SimProblemSpec if backend == "sim" else ToyProblemSpec
    kwargs = {}
    for k, v in data.items():
        if k in ("problems", "calibration"):
            kwargs[k] = _build(spec_cls, v)
        elif k == "model":
            kwargs[k] = _build(ModelConfig, v)
        elif k == "sim":
            kwargs[k] = _build(SimConfig, v)
        elif k == "grid":
            kwargs[k] = _build(GridSpace, v)
        elif k == "engine":
            kwargs[k] = _build(EngineConfig, v)
        else:
            kwargs[k] = tuple(v) if isinstance(v, list) else v
    if "calibration" not in kwargs and backend == "toy":
        kwargs["calibration"] = ToyProblemSpec(seed=1)
    if "problems" not in kwargs and backend == "toy":
        kwargs["problems"] = ToyProblemSpec()
    return _build_top(kwargs)


def _build_top(kwargs) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(kwargs) - names
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    return RunConfig(**kwargs)


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return from_dict(data)


def load(path, *, require_basis: bool = False) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    cfg = loads(p.read_text(encoding="utf-8"))
    if require_basis:
        check_basis_path(cfg)
    return cfg


def check_basis_path(cfg: RunConfig) -> None:
    if cfg.basis_path is None:
        raise ConfigError("basis_path is required for this mode")
    if not Path(cfg.basis_path).is_file():
        raise ConfigError(f"basis file {cfg.basis_path} does not exist")


def save(path, cfg: RunConfig) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
