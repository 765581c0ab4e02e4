"""Shared numeric substrate: control bounds, trajectories, RK4, seeded streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtr

Array = NDArray[np.float64]
Field = Callable[[Array, Array], Array]


class IntegrationError(ArithmeticError):
    """Raised when a derivative evaluation produces NaN or Inf."""

    def __init__(self, stage: int, message: str = ""):
        self.stage = stage
        super().__init__(message or f"non-finite derivative at RK4 stage {stage}")


def as_state(values: ArrayLike) -> Array:
    x = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite entries")
    return x


@dataclass(frozen=True)
class ControlBounds:
    """Per-entry closed interval for a control vector.

    ``levels`` optionally restricts an entry to a discrete set (used for
    event-style actuation such as left/right stimulation); ``None`` means
    continuous. Entries of ``levels`` are either ``None`` or a sorted tuple.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    levels: tuple[tuple[float, ...] | None, ...] | None = None

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo/hi length mismatch")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("lower bound exceeds upper bound")
        if self.levels is not None and len(self.levels) != len(self.lo):
            raise ValueError("levels length mismatch")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_array(self) -> Array:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_array(self) -> Array:
        return np.asarray(self.hi, dtype=np.float64)

    def clamp(self, u: ArrayLike) -> Array:
        """Clip to the box, then snap discrete entries to their nearest level.

        Works on any array whose last axis is the control dimension.
        """
        u = np.clip(np.asarray(u, dtype=np.float64), self.lo_array, self.hi_array)
        if self.levels is not None:
            for j, lev in enumerate(self.levels):
                if lev is None:
                    continue
                grid = np.asarray(lev, dtype=np.float64)
                idx = np.abs(u[..., j, None] - grid).argmin(axis=-1)
                u[..., j] = grid[idx]
        return u

    @classmethod
    def symmetric(cls, limit: float | Sequence[float], dim: int | None = None) -> "ControlBounds":
        lim = np.broadcast_to(np.asarray(limit, dtype=float), (dim,) if dim else np.shape(limit))
        return cls(tuple(float(-v) for v in lim), tuple(float(v) for v in lim))


@dataclass(frozen=True)
class Trajectory:
    """States ``(K+1, n)`` and controls ``(K, m)`` sampled at a constant ``dt``."""

    states: Array
    controls: Array
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        c = np.asarray(self.controls, dtype=np.float64)
        if s.ndim != 2 or c.ndim != 2:
            raise ValueError("states and controls must be 2-D")
        if s.shape[0] != c.shape[0] + 1:
            raise ValueError(f"expected {c.shape[0] + 1} states, got {s.shape[0]}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "controls", c)

    def __len__(self) -> int:
        return self.controls.shape[0]

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(self.states.shape[0])

    @property
    def n_state(self) -> int:
        return self.states.shape[1]

    @property
    def n_control(self) -> int:
        return self.controls.shape[1]


def _check(k: Array, stage: int) -> Array:
    if not np.all(np.isfinite(k)):
        raise IntegrationError(stage)
    return k


def rk4_step(fn: Field, x: Array, u: Array, dt: float) -> Array:
    """Classical fourth-order Runge-Kutta step with ``u`` held constant.

    ``x`` may carry leading batch axes as long as ``fn`` broadcasts over them.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = _check(fn(x, u), 1)
    k2 = _check(fn(x + 0.5 * dt * k1, u), 2)
    k3 = _check(fn(x + 0.5 * dt * k2, u), 3)
    k4 = _check(fn(x + dt * k3, u), 4)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def euler_step(value: ArrayLike, derivative: ArrayLike, rate: float, dt: float) -> Array:
    """Forward Euler: ``value + rate * derivative * dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if rate < 0:
        raise ValueError("rate must be non-negative")
    out = np.asarray(value, dtype=np.float64) + rate * np.asarray(derivative, dtype=np.float64) * dt
    if not np.all(np.isfinite(out)):
        raise IntegrationError(0, "non-finite Euler update")
    return out


def derive_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, index)``."""
    state = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass
class RngStream:
    """Counter-based (Philox) Gaussian stream owned by a single consumer.

    ``counter`` counts scalar normal draws taken so far.
    """

    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self._gen = np.random.Generator(np.random.Philox(self.seed))
        if self.counter:
            self._gen.standard_normal(self.counter)

    def normal(self, shape: int | tuple[int, ...] = ()) -> Array | float:
        z = self._gen.standard_normal(shape)
        self.counter += int(np.size(z))
        return z

    def uniform(self, shape: int | tuple[int, ...] = ()) -> Array | float:
        # uniforms are derived from normals so the counter stays one kind of draw
        return ndtr(self.normal(shape))

    def child(self, index: int) -> "RngStream":
        return RngStream(derive_seed(self.seed, index))


def draw_gaussian(rng: RngStream, mean: ArrayLike, stddev: ArrayLike) -> Array:
    mean = np.asarray(mean, dtype=np.float64)
    stddev = np.asarray(stddev, dtype=np.float64)
    if np.any(stddev < 0):
        raise ValueError("stddev must be non-negative")
    shape = np.broadcast_shapes(mean.shape, stddev.shape)
    return mean + stddev * rng.normal(shape)
