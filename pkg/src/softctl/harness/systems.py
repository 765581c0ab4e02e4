"""Uniform adapters around the simulated plants.

The runner talks to every plant through the same handful of calls: build an
initial plant, read the model state, apply a control, and produce excitation
inputs for data collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from softctl.config import from_dict
from softctl.core import Array, ControlBounds, RngStream
from softctl.plants import (
    ArmParams,
    ArmPlant,
    CyborgParams,
    CyborgPlant,
    FishParams,
    FishPlant,
    Stimulus,
    apply_fatigue,
    arm_step,
    cruise_speed,
    cyborg_step,
    fish_step,
)

PLANT_KINDS = ("arm", "fish", "cyborg", "null")


@dataclass(frozen=True)
class InitialConfig:
    """Initial plant state. ``None`` entries are taken from the reference start.

    ``control`` is the input the plant is holding at ``t = 0``; it seeds the
    planner's warm start so the first ticks do not begin from zero input.
    """

    position: tuple[float, ...] | None = None
    velocity: tuple[float, ...] | None = None
    heading: float | None = None
    speed: float | None = None
    amplitude: float | None = None
    control: tuple[float, ...] | None = None
    position_jitter: float = 0.0
    heading_jitter: float = 0.0


@dataclass(frozen=True)
class CollectConfig:
    """Randomized excitation for training data.

    The trailing ``validation_fraction`` of trajectories is recorded without
    process noise and reserved for calibrating the error bound.
    """

    trajectories: int = 40
    steps: int = 200
    validation_fraction: float = 0.2
    seed: int = 0
    hold: tuple[float, float] = (0.2, 1.0)
    smoothing: float = 0.1
    region: tuple[float, ...] = (0.06, 0.06, 0.01)
    stim_probability: float = 0.1
    params: dict[str, float | int | bool] | None = None

    def __post_init__(self):
        if self.trajectories < 0 or self.steps < 1:
            raise ValueError("need trajectories >= 0 and steps >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if not 0 < self.hold[0] <= self.hold[1]:
            raise ValueError("hold must be an increasing positive pair")


class System:
    kind = ""
    n_state = 0
    n_control = 0
    position_index: tuple[int, ...] = ()
    lookahead_index: tuple[int, ...] = ()
    params_type: type = object
    noise_param: str | None = None

    def __init__(self, params: dict | None = None, control_lo=None, control_hi=None, path: str = "plant.params"):
        self.params = from_dict(self.params_type, params or {}, path) if self.params_type is not object else None
        b = self.default_bounds()
        lo = b.lo if control_lo is None else tuple(float(v) for v in control_lo)
        hi = b.hi if control_hi is None else tuple(float(v) for v in control_hi)
        if len(lo) != self.n_control or len(hi) != self.n_control:
            raise ValueError(f"{self.kind} control bounds need {self.n_control} entries")
        self.bounds = ControlBounds(lo, hi, b.levels)

    def with_params(self, overrides: dict) -> "System":
        """Same adapter with some plant parameters replaced."""
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        if overrides:
            new.params = replace(self.params, **overrides)
        return new

    def default_bounds(self) -> ControlBounds:
        raise NotImplementedError

    def quiet(self) -> "System":
        """Same plant without process noise."""
        return self.with_params({self.noise_param: 0.0} if self.noise_param else {})

    def position(self, x: Array) -> Array:
        return np.asarray(x)[..., list(self.position_index)]

    def stimulations(self, plant) -> int:
        return 0

    def excitation(self, rng: RngStream, steps: int, dt: float, cfg: CollectConfig) -> Array:
        """Piecewise-constant random targets, low-pass filtered, then clamped."""
        lo, hi = self.bounds.lo_array, self.bounds.hi_array
        out = np.empty((steps, self.n_control))
        u = lo + (hi - lo) * rng.uniform(self.n_control)
        target = u.copy()
        remaining = 0.0
        a = 1.0 if cfg.smoothing <= 0 else 1.0 - math.exp(-dt / cfg.smoothing)
        for k in range(steps):
            if remaining <= 0:
                target = lo + (hi - lo) * rng.uniform(self.n_control)
                remaining = cfg.hold[0] + (cfg.hold[1] - cfg.hold[0]) * float(rng.uniform())
            u = u + a * (target - u)
            out[k] = u
            remaining -= dt
        return self.bounds.clamp(out)


class ArmSystem(System):
    kind = "arm"
    n_state = 6
    n_control = 4
    position_index = (0, 1, 2)
    lookahead_index = (3, 4, 5)
    params_type = ArmParams
    noise_param = "sigma"

    def default_bounds(self):
        return ControlBounds.symmetric(1.0, 4)

    def initial(self, init: InitialConfig, start: Array, heading: float, rng: RngStream, fatigue: int = 0):
        p = np.zeros(3)
        src = start if init.position is None else init.position
        p[: len(src)] = src
        p = p + init.position_jitter * rng.normal(3) * np.array([1.0, 1.0, 0.0])
        v = np.zeros(3) if init.velocity is None else np.asarray(init.velocity, float)
        plant = ArmPlant(p=p, v=v, params=self.params)
        return apply_fatigue(plant, fatigue) if fatigue else plant

    def random_initial(self, rng: RngStream, cfg: CollectConfig):
        r = np.broadcast_to(np.asarray(cfg.region, float), (3,))
        p = r * (2.0 * rng.uniform(3) - 1.0)
        return ArmPlant(p=p, v=np.zeros(3), params=self.params)

    def observe(self, plant: ArmPlant) -> Array:
        return plant.state

    def actuate(self, plant: ArmPlant, u: Array, dt: float, rng: RngStream):
        return arm_step(plant, u, dt, rng), 0


class FishSystem(System):
    kind = "fish"
    n_state = 5
    n_control = 2
    position_index = (0, 1)
    lookahead_index = (2, 3)
    params_type = FishParams
    noise_param = "sigma_heading"

    def default_bounds(self):
        p = self.params
        return ControlBounds((-p.bias_max, p.amplitude_min), (p.bias_max, p.amplitude_max))

    def initial(self, init: InitialConfig, start: Array, heading: float, rng: RngStream, fatigue: int = 0):
        pos = np.asarray(start if init.position is None else init.position, float)[:2]
        pos = pos + init.position_jitter * rng.normal(2)
        psi = (heading if init.heading is None else init.heading) + init.heading_jitter * float(rng.normal())
        amp = 0.5 * (self.bounds.lo[1] + self.bounds.hi[1]) if init.amplitude is None else init.amplitude
        speed = cruise_speed(self.params, amp) if init.speed is None else init.speed
        return FishPlant(float(pos[0]), float(pos[1]), float(psi), float(speed), 0.0, float(amp), self.params)

    def random_initial(self, rng: RngStream, cfg: CollectConfig):
        r = np.broadcast_to(np.asarray(cfg.region, float)[:2], (2,))
        pos = r * (2.0 * rng.uniform(2) - 1.0)
        psi = math.pi * (2.0 * float(rng.uniform()) - 1.0)
        lo, hi = self.bounds.lo[1], self.bounds.hi[1]
        amp = lo + (hi - lo) * float(rng.uniform())
        speed = cruise_speed(self.params, hi) * float(rng.uniform())
        return FishPlant(float(pos[0]), float(pos[1]), psi, speed, 0.0, amp, self.params)

    def observe(self, plant: FishPlant) -> Array:
        return plant.state

    def actuate(self, plant: FishPlant, u: Array, dt: float, rng: RngStream):
        b = float(np.clip(u[0], -self.params.bias_max, self.params.bias_max))
        return fish_step(plant, b, dt, rng, amplitude=float(u[1])), 0


class CyborgSystem(System):
    kind = "cyborg"
    n_state = 4
    n_control = 1
    position_index = (0, 1)
    lookahead_index = (2, 3)
    params_type = CyborgParams
    noise_param = "sigma_heading"

    def default_bounds(self):
        return ControlBounds((-1.0,), (1.0,), ((-1.0, 0.0, 1.0),))

    def initial(self, init: InitialConfig, start: Array, heading: float, rng: RngStream, fatigue: int = 0):
        pos = np.asarray(start if init.position is None else init.position, float)[:2]
        pos = pos + init.position_jitter * rng.normal(2)
        psi = (heading if init.heading is None else init.heading) + init.heading_jitter * float(rng.normal())
        return CyborgPlant(float(pos[0]), float(pos[1]), float(psi), int(fatigue), self.params)

    def random_initial(self, rng: RngStream, cfg: CollectConfig):
        r = np.broadcast_to(np.asarray(cfg.region, float)[:2], (2,))
        pos = r * (2.0 * rng.uniform(2) - 1.0)
        psi = 0.8 * (2.0 * float(rng.uniform()) - 1.0)
        return CyborgPlant(float(pos[0]), float(pos[1]), psi, 0, self.params)

    def observe(self, plant: CyborgPlant) -> Array:
        return plant.state

    def stimulations(self, plant: CyborgPlant) -> int:
        return plant.count

    def excitation(self, rng: RngStream, steps: int, dt: float, cfg: CollectConfig) -> Array:
        fire = rng.uniform(steps) < cfg.stim_probability
        side = np.where(rng.uniform(steps) < 0.5, -1.0, 1.0)
        return np.where(fire, side, 0.0)[:, None]

    def actuate(self, plant: CyborgPlant, u: Array, dt: float, rng: RngStream):
        stim = Stimulus.from_control(float(u[0]))
        return cyborg_step(plant, stim, dt, rng), stim.value


@dataclass(frozen=True)
class NullPlant:
    x: Array


class NullSystem(System):
    """Zero-field plant: the state never moves whatever the input."""

    kind = "null"
    n_state = 2
    n_control = 2
    position_index = (0, 1)
    lookahead_index = (0, 1)

    def default_bounds(self):
        return ControlBounds.symmetric(1.0, 2)

    def with_params(self, overrides: dict) -> "System":
        if overrides:
            raise ValueError("the null plant has no parameters")
        return self

    def initial(self, init: InitialConfig, start: Array, heading: float, rng: RngStream, fatigue: int = 0):
        src = start if init.position is None else init.position
        x = np.zeros(2)
        x[: len(src)] = np.asarray(src, float)[:2]
        return NullPlant(x + init.position_jitter * rng.normal(2))

    def random_initial(self, rng: RngStream, cfg: CollectConfig):
        return NullPlant(np.zeros(2))

    def observe(self, plant: NullPlant) -> Array:
        return plant.x.copy()

    def actuate(self, plant: NullPlant, u: Array, dt: float, rng: RngStream):
        return plant, 0


def make_system(kind: str, params: dict | None = None, control_lo=None, control_hi=None) -> System:
    table = {"arm": ArmSystem, "fish": FishSystem, "cyborg": CyborgSystem, "null": NullSystem}
    if kind not in table:
        raise ValueError(f"unknown plant kind {kind!r}")
    if kind == "null" and params:
        raise ValueError("the null plant has no parameters")
    return table[kind](params, control_lo, control_hi)
