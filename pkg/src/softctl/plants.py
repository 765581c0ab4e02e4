"""Simulated surrogate plants: tendon arm, undulating fish, stimulated walker.

These are phenomenological stand-ins (attractor arm, unicycle swimmers), not
continuum-mechanics models. Every step returns a new plant value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from softctl.core import Array, RngStream, rk4_step


# --------------------------------------------------------------------------- arm


@dataclass(frozen=True)
class ArmParams:
    spring: float = 36.0          # 1/s^2, pull toward the attractor
    damping: float = 10.8         # 1/s
    bend_reach: float = 0.1       # m of tip travel per unit tendon differential
    axial_reach: float = 0.02     # m of shortening at full co-activation
    sigma: float = 0.0            # m/s per sqrt(s), velocity process noise
    workspace_radius: float = 0.15
    fatigue_rho: float = 0.4
    fatigue_saturation: int = 3000
    substeps: int = 1


@dataclass(frozen=True)
class ArmPlant:
    p: Array = field(default_factory=lambda: np.zeros(3))
    v: Array = field(default_factory=lambda: np.zeros(3))
    kappa: float = 1.0
    kappa0: float = 1.0
    params: ArmParams = field(default_factory=ArmParams)
    rest: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")

    @property
    def state(self) -> Array:
        return np.concatenate([self.p, self.v])


def tendon_routing(params: ArmParams) -> Array:
    """Map from the four tendon commands to attractor displacement.

    Tendons 1/2 form the antagonistic x pair and 3/4 the y pair; common-mode
    pull shortens the arm along z.
    """
    b, a = 0.5 * params.bend_reach, 0.25 * params.axial_reach
    return np.array(
        [
            [b, -b, 0.0, 0.0],
            [0.0, 0.0, b, -b],
            [a, a, a, a],
        ]
    )


def arm_attractor(plant: ArmPlant, u: Array) -> Array:
    return plant.rest + plant.kappa * (tendon_routing(plant.params) @ np.asarray(u, dtype=float))


def arm_field(plant: ArmPlant, u: Array):
    """Second-order attractor dynamics as a field on ``[p, v]``."""
    prm = plant.params
    target = arm_attractor(plant, u)

    def fn(x: Array, _u: Array) -> Array:
        p, v = x[..., :3], x[..., 3:]
        acc = prm.spring * (target - p) - prm.damping * v
        return np.concatenate([v, acc], axis=-1)

    return fn


def arm_step(plant: ArmPlant, u: Array, dt: float, rng: RngStream) -> ArmPlant:
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    prm = plant.params
    fn = arm_field(plant, u)
    x = plant.state
    h = dt / prm.substeps
    for _ in range(prm.substeps):
        x = rk4_step(fn, x, u, h)
    p, v = x[:3].copy(), x[3:].copy()
    v = v + prm.sigma * math.sqrt(dt) * rng.normal(3)
    off = p - plant.rest
    r = float(np.linalg.norm(off))
    if r > prm.workspace_radius:
        p = plant.rest + off * (prm.workspace_radius / r)
        radial = off / r
        v = v - max(float(v @ radial), 0.0) * radial
    return replace(plant, p=p, v=v)


def fatigue_factor(cycles: int, rho: float = 0.4, saturation: int = 3000) -> float:
    if cycles < 0:
        raise ValueError("cycles must be non-negative")
    return 1.0 - rho * min(cycles, saturation) / saturation


def apply_fatigue(plant: ArmPlant, cycles: int) -> ArmPlant:
    """Stiffness-scale drift after ``cycles`` operating cycles (saturating)."""
    prm = plant.params
    return replace(plant, kappa=plant.kappa0 * fatigue_factor(cycles, prm.fatigue_rho, prm.fatigue_saturation))


# -------------------------------------------------------------------------- fish


@dataclass(frozen=True)
class FishParams:
    turn_gain: float = 4.0        # 1/s per rad of bias
    bias_max: float = 0.3         # rad
    amplitude_min: float = 0.0    # rad
    amplitude_max: float = 0.6    # rad
    frequency: float = 2.0 * math.pi * 1.5  # rad/s tail beat
    thrust_gain: float = 0.07     # m/s per (rad amplitude * rad/s beat)
    speed_tau: float = 0.8        # s
    sigma_heading: float = 0.0    # rad per sqrt(s)


@dataclass(frozen=True)
class FishPlant:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    speed: float = 0.0
    bias: float = 0.0
    amplitude: float = 0.3
    params: FishParams = field(default_factory=FishParams)

    @property
    def omega(self) -> float:
        return self.params.frequency

    @property
    def state(self) -> Array:
        return np.array([self.x, self.y, math.cos(self.psi), math.sin(self.psi), self.speed])

    @property
    def position(self) -> Array:
        return np.array([self.x, self.y])


def cruise_speed(params: FishParams, amplitude: float) -> float:
    return params.thrust_gain * amplitude * params.frequency


def fish_step(
    plant: FishPlant, bias: float, dt: float, rng: RngStream, amplitude: float | None = None
) -> FishPlant:
    """Advance the swimmer; heading rate is proportional to the tail bias."""
    prm = plant.params
    if abs(bias) > prm.bias_max + 1e-12:
        raise ValueError(f"|bias| {abs(bias):.4g} exceeds limit {prm.bias_max}")
    amp = plant.amplitude if amplitude is None else float(amplitude)
    amp = min(max(amp, prm.amplitude_min), prm.amplitude_max)
    s_target = cruise_speed(prm, amp)
    rate = prm.turn_gain * bias

    def fn(z: Array, _u) -> Array:
        psi, s = z[2], z[3]
        return np.array([s * math.cos(psi), s * math.sin(psi), rate, (s_target - s) / prm.speed_tau])

    z = rk4_step(fn, np.array([plant.x, plant.y, plant.psi, plant.speed]), None, dt)
    psi = z[2] + prm.sigma_heading * math.sqrt(dt) * rng.normal()
    return replace(
        plant, x=float(z[0]), y=float(z[1]), psi=float(psi), speed=max(float(z[3]), 0.0), bias=float(bias), amplitude=amp
    )


# ------------------------------------------------------------------------ cyborg


class Stimulus(enum.Enum):
    NONE = 0
    LEFT = 1
    RIGHT = -1

    @classmethod
    def from_control(cls, value: float) -> "Stimulus":
        if value > 0.5:
            return cls.LEFT
        if value < -0.5:
            return cls.RIGHT
        return cls.NONE


@dataclass(frozen=True)
class CyborgParams:
    speed: float = 0.05           # m/s walking speed
    kick: float = 0.3             # rad heading change of a fresh response
    sigma_heading: float = 0.15   # rad per sqrt(s)
    habituation: bool = True
    habituation_scale: float = 60.0
    gain_floor: float = 1e-9


@dataclass(frozen=True)
class CyborgPlant:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    count: int = 0
    params: CyborgParams = field(default_factory=CyborgParams)

    @property
    def state(self) -> Array:
        return np.array([self.x, self.y, math.cos(self.psi), math.sin(self.psi)])

    @property
    def position(self) -> Array:
        return np.array([self.x, self.y])

    @property
    def gain(self) -> float:
        return habituation_gain(self.count, self.params)


def habituation_gain(count: int, params: CyborgParams) -> float:
    """Response gain after ``count`` stimulations: ``exp(-count/scale)``, floored."""
    if not params.habituation:
        return 1.0
    return max(math.exp(-count / params.habituation_scale), params.gain_floor)


def cyborg_step(plant: CyborgPlant, stimulus: Stimulus | None, dt: float, rng: RngStream) -> CyborgPlant:
    prm = plant.params
    psi, count = plant.psi, plant.count
    if stimulus is not None and stimulus is not Stimulus.NONE:
        psi += stimulus.value * prm.kick * habituation_gain(count, prm)
        count += 1
    x = plant.x + prm.speed * math.cos(psi) * dt
    y = plant.y + prm.speed * math.sin(psi) * dt
    psi += prm.sigma_heading * math.sqrt(dt) * rng.normal()
    return replace(plant, x=x, y=y, psi=psi, count=count)
