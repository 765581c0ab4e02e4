"""Sampling-based receding-horizon planner over the learned model.

Candidates are Gaussian perturbations of a warm-start sequence, rolled out
through the model and scored with a tracking-plus-penalty cost. Exponential
weights are reported alongside the argmin candidate; only the argmin feeds
the safety filter.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from softctl.barriers import BarrierSpec
from softctl.core import Array, ControlBounds, RngStream, Trajectory
from softctl.model import ModelParams, rollout_batch

log = logging.getLogger(__name__)


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    samples: int = 256
    horizon: int = 20
    stddev: tuple[float, ...] = (0.3,)
    temperature: float = 1.0
    nominal: str = "shift"
    workers: int = 1
    correlation: float = 0.0

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least two candidates")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.nominal not in ("shift", "zero"):
            raise ValueError("nominal policy must be 'shift' or 'zero'")
        if any(s < 0 for s in self.stddev):
            raise ValueError("stddev must be non-negative")
        if not 0.0 <= self.correlation < 1.0:
            raise ValueError("correlation must lie in [0, 1)")


@dataclass
class TaskSpec:
    """Stage cost ``l(x_k, u_k)`` plus penalty ``lambda(x_k)`` over ``k = 1..H``.

    ``reference`` is either a constant target for the ``tracked`` state
    entries or an ``(H, len(tracked))`` array aligned with ``x_1..x_H``.
    """

    tracked: tuple[int, ...]
    reference: Array
    track_weight: Array
    input_weight: Array
    rate_weight: Array
    input_ref: Array | None = None
    penalties: tuple[BarrierSpec, ...] = ()
    penalty_weight: float = 0.0
    penalty_margin: float = 0.0
    terminal_weight: Array | None = None
    previous_input: Array | None = None

    def __post_init__(self):
        self.track_weight = np.asarray(self.track_weight, dtype=np.float64)
        self.input_weight = np.asarray(self.input_weight, dtype=np.float64)
        self.rate_weight = np.asarray(self.rate_weight, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.float64)
        ws = [self.track_weight, self.input_weight, self.rate_weight, np.atleast_1d(self.penalty_weight)]
        if self.terminal_weight is not None:
            self.terminal_weight = np.asarray(self.terminal_weight, dtype=np.float64)
            ws.append(self.terminal_weight)
        if any(np.any(w < 0) for w in ws):
            raise ValueError("cost weights must be non-negative")
        if not any(np.any(w > 0) for w in ws):
            raise ValueError("at least one cost weight must be positive")


@dataclass
class CandidateBatch:
    """Paired candidates: ``controls[i]`` produced ``states[i]``.

    ``derivs[i, k]`` is the model derivative ``f(x_k, u_k)`` along candidate
    ``i``; ``derivs[:, 0]`` is what the safety filter compares.
    """

    controls: Array
    states: Array
    derivs: Array
    costs: Array
    weights: Array
    optimal: int
    dt: float
    weighted_mean: Array | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.controls.shape[0]

    def prediction(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.controls[i], self.dt)


def sample_controls(
    config: SamplerConfig, nominal: Array, bounds: ControlBounds, rng: RngStream
) -> Array:
    """``n`` clamped perturbations of ``nominal``; row 0 is ``nominal`` itself.

    With ``config.correlation = rho > 0`` the perturbation of each entry is an
    AR(1) sequence along the horizon, scaled so every step keeps the
    configured marginal stddev.
    """
    nominal = np.asarray(nominal, dtype=np.float64)
    H, m = nominal.shape
    std = np.broadcast_to(np.asarray(config.stddev, dtype=np.float64), (m,))
    noise = rng.normal((config.samples, H, m))
    rho = config.correlation
    if rho > 0:
        keep = np.sqrt(1.0 - rho * rho)
        for k in range(1, H):
            noise[:, k] = rho * noise[:, k - 1] + keep * noise[:, k]
    noise *= std
    noise[0] = 0.0
    return bounds.clamp(nominal[None] + noise)


def _smooth_hinge(d: Array, margin: float) -> Array:
    # quadratic hinge: C1 at the kink, zero once the clearance exceeds margin
    v = np.maximum(margin - d, 0.0)
    return v * v


def evaluate_costs(states: Array, controls: Array, task: TaskSpec) -> Array:
    """Vectorized cost for ``states`` (N, H+1, n) and ``controls`` (N, H, m)."""
    xs = states[:, 1:, :]
    err = xs[..., list(task.tracked)] - task.reference
    cost = np.einsum("nhd,d->n", err * err, task.track_weight)
    u_ref = 0.0 if task.input_ref is None else task.input_ref
    du = controls - u_ref
    cost = cost + np.einsum("nhm,m->n", du * du, task.input_weight)
    if np.any(task.rate_weight > 0):
        prev = controls[:, :1] if task.previous_input is None else np.broadcast_to(
            task.previous_input, controls[:, :1].shape
        )
        diffs = np.diff(np.concatenate([prev, controls], axis=1), axis=1)
        cost = cost + np.einsum("nhm,m->n", diffs * diffs, task.rate_weight)
    if task.penalty_weight > 0:
        for spec in task.penalties:
            d = spec.signed_distance(xs)
            cost = cost + task.penalty_weight * _smooth_hinge(d, task.penalty_margin).sum(axis=1)
    if task.terminal_weight is not None:
        e = err[:, -1]
        cost = cost + np.einsum("nd,d->n", e * e, task.terminal_weight)
    return cost


def evaluate_cost(prediction: Trajectory, controls: Array, task: TaskSpec) -> float:
    controls = np.asarray(controls, dtype=np.float64)
    if prediction.states.shape[0] != controls.shape[0] + 1:
        raise ValueError("prediction must have H+1 states")
    return float(evaluate_costs(prediction.states[None], controls[None], task)[0])


def exponential_weights(costs: Array, temperature: float) -> Array:
    """Baseline-subtracted softmin weights, floored away from zero."""
    costs = np.asarray(costs, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite")
    w = np.exp(-(costs - costs.min()) / temperature)
    w = np.maximum(w, np.finfo(np.float64).tiny)
    return w / w.sum()


def select_optimal(costs: Array) -> int:
    """Lowest index attaining the minimum finite cost."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise PlannerError("empty candidate batch")
    finite = np.where(np.isfinite(costs), costs, np.inf)
    if not np.isfinite(finite).any():
        raise PlannerError("every candidate has a non-finite cost")
    return int(np.argmin(finite))


def nominal_sequence(previous: Array | None, horizon: int, bounds: ControlBounds, policy: str = "shift") -> Array:
    m = bounds.dim
    if previous is None or policy == "zero":
        return bounds.clamp(np.zeros((horizon, m)))
    prev = np.asarray(previous, dtype=np.float64)
    shifted = np.concatenate([prev[1:], prev[-1:]], axis=0)
    if shifted.shape[0] < horizon:
        shifted = np.concatenate([shifted, np.repeat(shifted[-1:], horizon - shifted.shape[0], 0)])
    return bounds.clamp(shifted[:horizon])


@lru_cache(maxsize=4)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="softctl-plan")


def _chunks(n: int, workers: int) -> list[slice]:
    # every chunk keeps >= 2 rows so BLAS takes the same (gemm) path as the full batch
    k = max(1, min(workers, n // 2))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def rollout_and_score(
    params: ModelParams, x_now: Array, controls: Array, task: TaskSpec, dt: float, workers: int = 1
) -> tuple[Array, Array, Array]:
    if workers <= 1:
        states, derivs = rollout_batch(params, x_now, controls, dt)
        return states, derivs, evaluate_costs(states, controls, task)

    def job(sl: slice):
        s, d = rollout_batch(params, x_now, controls[sl], dt)
        return s, d, evaluate_costs(s, controls[sl], task)

    parts = list(_pool(workers).map(job, _chunks(controls.shape[0], workers)))
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def plan_step(
    params: ModelParams,
    x_now: Array,
    task: TaskSpec,
    config: SamplerConfig,
    bounds: ControlBounds,
    dt: float,
    rng: RngStream,
    previous: Array | None = None,
) -> CandidateBatch:
    """Sample, roll out, score and rank one tick's candidates.

    The caller executes only ``controls[selected, 0]`` and replans next tick;
    pass the executed sequence back as ``previous`` to warm-start.
    """
    x_now = np.asarray(x_now, dtype=np.float64)
    if not np.all(np.isfinite(x_now)):
        raise PlannerError("current state is not finite")
    nominal = nominal_sequence(previous, config.horizon, bounds, config.nominal)
    controls = sample_controls(config, nominal, bounds, rng)
    states, derivs, costs = rollout_and_score(params, x_now, controls, task, dt, config.workers)
    best = select_optimal(costs)
    finite = np.isfinite(costs)
    safe_costs = np.where(finite, costs, costs[best] + 1e300)
    weights = exponential_weights(safe_costs, config.temperature)
    mean = np.einsum("n,nhm->hm", weights, controls)
    return CandidateBatch(controls, states, derivs, costs, weights, best, dt, mean)
