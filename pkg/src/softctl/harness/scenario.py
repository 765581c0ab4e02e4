"""Scenario schema and the objects built from it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from softctl import barriers as bar
from softctl.config import ConfigError, from_dict, load_yaml
from softctl.harness.references import Reference, ReferenceConfig
from softctl.harness.systems import PLANT_KINDS, CollectConfig, InitialConfig, System, make_system
from softctl.model import TrainConfig
from softctl.planner import SamplerConfig

CONTROLLERS = ("framework", "no-acbf", "pid", "continuous")
_ALIASES = {
    "framework-no-adaptive-cbf": "no-acbf",
    "PID": "pid",
    "continuous-stimulation": "continuous",
}


def canonical_controller(name: str) -> str:
    name = _ALIASES.get(name, _ALIASES.get(name.lower(), name))
    if name not in CONTROLLERS:
        raise ValueError(f"unknown controller {name!r}; expected one of {', '.join(CONTROLLERS)}")
    return name


@dataclass(frozen=True)
class PlantConfig:
    kind: str = "null"
    params: dict[str, float | int | bool] | None = None
    initial: InitialConfig = field(default_factory=InitialConfig)
    fatigue_cycles: int = 0
    carry_over: bool = False
    control_lo: tuple[float, ...] | None = None
    control_hi: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in PLANT_KINDS:
            raise ValueError(f"unknown plant kind {self.kind!r}")
        if self.fatigue_cycles < 0:
            raise ValueError("fatigue_cycles must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "learned"
    checkpoint: str | None = None
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    bound_factor: float = 1.25
    collect: CollectConfig = field(default_factory=CollectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.kind not in ("learned", "zero"):
            raise ValueError("model kind must be 'learned' or 'zero'")


@dataclass(frozen=True)
class TaskConfig:
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    tracked: tuple[int, ...] = (0, 1)
    track_weight: tuple[float, ...] = (1.0, 1.0)
    input_weight: tuple[float, ...] = (0.0,)
    rate_weight: tuple[float, ...] = (0.0,)
    input_ref: tuple[float, ...] | None = None
    penalties: tuple[str, ...] = ()
    penalty_weight: float = 0.0
    penalty_margin: float = 0.0
    terminal_weight: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.track_weight) != len(self.tracked):
            raise ValueError("track_weight needs one entry per tracked index")


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "position"
    distance: float = 0.0
    dims: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("position", "lookahead"):
            raise ValueError("probe kind must be 'position' or 'lookahead'")


@dataclass(frozen=True)
class BarrierConfig:
    name: str
    kind: str
    role: str = "both"
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    center: tuple[float, ...] = ()
    radius: float = 0.0
    axis: int = 1
    offset: float = 0.0
    half_width: float = 0.0
    path: str | None = None
    vertices: tuple[tuple[float, ...], ...] = ()
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in bar.KINDS:
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        if self.role not in ("filter", "monitor", "both"):
            raise ValueError("barrier role must be 'filter', 'monitor' or 'both'")
        if self.path not in (None, "reference"):
            raise ValueError("barrier path must be 'reference' or omitted")


@dataclass(frozen=True)
class FilterConfig:
    alpha: float = 1.0
    gain: float = 1.0
    theta_max: float | None = None
    theta_max_factor: float = 10.0
    distance: str = "first_step"
    steps: int = 1
    adaptive: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.gain < 0:
            raise ValueError("adaptive gain must be non-negative")
        if self.distance not in ("first_step", "trajectory"):
            raise ValueError("distance must be 'first_step' or 'trajectory'")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class MetricsConfig:
    tsf: str | None = None
    asf: tuple[str, ...] = ()
    corridor: str | None = None
    track_threshold: float | None = None


@dataclass(frozen=True)
class PidConfig:
    kp: float = 2.0
    ki: float = 0.5
    kd: float = 0.0
    limit: float | None = None
    lookahead: float = 0.15
    amplitude: float | None = None


@dataclass(frozen=True)
class ContinuousConfig:
    threshold: float = 0.1
    lookahead: float = 0.1


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: PlantConfig = field(default_factory=PlantConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    planner: SamplerConfig = field(default_factory=SamplerConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    barriers: tuple[BarrierConfig, ...] = ()
    filter: FilterConfig = field(default_factory=FilterConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    pid: PidConfig = field(default_factory=PidConfig)
    continuous: ContinuousConfig = field(default_factory=ContinuousConfig)
    dt: float = 0.05
    duration: float = 10.0
    controller: str = "framework"
    seed: int = 0
    trials: int = 1
    trial_workers: int = 1

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ValueError("dt and duration must be positive")
        k = self.duration / self.dt
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError(f"duration {self.duration} is not an integer number of dt={self.dt} steps")
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.trial_workers < 1:
            raise ValueError("trial_workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "controller", canonical_controller(self.controller))
        names = [b.name for b in self.barriers]
        if len(set(names)) != len(names):
            raise ValueError("barrier names must be unique")
        known = set(names)
        refs = [*self.task.penalties, *self.metrics.asf]
        refs += [n for n in (self.metrics.tsf, self.metrics.corridor) if n is not None]
        for n in refs:
            if n not in known:
                raise ValueError(f"reference to unknown barrier {n!r}")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


def parse_scenario(data: dict, path: str = "") -> Scenario:
    scn = from_dict(Scenario, data, path)
    # plant parameters are checked against the plant's own schema here so the
    # error names the offending key
    make_system(scn.plant.kind, scn.plant.params, scn.plant.control_lo, scn.plant.control_hi)
    if scn.model.collect.params:
        make_system(scn.plant.kind, {**(scn.plant.params or {}), **scn.model.collect.params})
    return scn


def load_scenario(path: str | Path) -> Scenario:
    data = load_yaml(path)
    if not isinstance(data, dict):
        raise ConfigError("", "scenario file must hold a mapping")
    return parse_scenario(data)


def builtin_scenarios() -> list[str]:
    root = resources.files("softctl.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def builtin_path(name: str) -> Path:
    p = Path(str(resources.files("softctl.scenarios").joinpath(f"{name}.yaml")))
    if not p.exists():
        raise FileNotFoundError(f"no built-in scenario {name!r}")
    return p


def resolve_scenario_path(arg: str | Path) -> Path:
    """Accept a file path or the name of a bundled scenario."""
    p = Path(arg)
    if p.exists():
        return p
    if p.suffix == "" and p.parent == Path("."):
        return builtin_path(str(p))
    raise FileNotFoundError(f"scenario file {arg} not found")


# ------------------------------------------------------------------ builders


def make_probe(cfg: ProbeConfig, system: System) -> np.ndarray:
    pos = system.position_index
    look = system.lookahead_index
    if cfg.dims is not None:
        pos = tuple(pos[d] for d in cfg.dims)
        look = tuple(look[d] for d in cfg.dims)
    if cfg.kind == "position" or cfg.distance == 0.0:
        return bar.position_probe(system.n_state, pos)
    return bar.lookahead_probe(system.n_state, pos, look, cfg.distance)


def build_barrier(cfg: BarrierConfig, system: System, reference: Reference) -> bar.BarrierSpec:
    P = make_probe(cfg.probe, system)
    meta = {"role": cfg.role}
    if cfg.kind == "obstacle":
        spec = bar.obstacle(cfg.center, cfg.radius, P, cfg.name)
    elif cfg.kind == "corridor":
        spec = bar.corridor(cfg.half_width, P, cfg.axis, cfg.offset, cfg.name)
    elif cfg.kind == "band":
        if cfg.path == "reference":
            path = reference.path[:, : P.shape[0]]
        else:
            path = np.asarray(cfg.vertices, float)
        spec = bar.band(path, cfg.half_width, P, cfg.name, cfg.scale)
    else:
        spec = bar.box(cfg.lo, cfg.hi, P, cfg.name)
    return replace(spec, meta=meta, scale=cfg.scale)


def heading_of(path: np.ndarray) -> float:
    d = path[1] - path[0]
    if np.allclose(d[:2], 0.0):
        return 0.0
    return math.atan2(float(d[1]), float(d[0]))
