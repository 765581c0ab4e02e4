"""Adaptive barrier-function filter over a finite candidate set.

The filter never synthesizes a new input. It only picks among the planner's
candidates and hands back the control sequence paired with the chosen
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from softctl.barriers import BarrierSpec, barrier_eval
from softctl.core import Array, Trajectory, euler_step
from softctl.planner import CandidateBatch

__all__ = [
    "AdaptiveEstimate",
    "FilterDecision",
    "MappingError",
    "ReciprocalMap",
    "admissibility_margin",
    "barrier_eval",
    "candidate_margins",
    "filter_select",
    "reciprocal_map",
    "update_adaptive",
]


class MappingError(IndexError):
    pass


@dataclass(frozen=True)
class AdaptiveEstimate:
    """Uncertainty estimate ``theta`` with gain and a norm bound.

    ``history`` keeps the last ``history_len`` values of ``|theta|``.
    """

    theta: Array
    gain: float = 1.0
    theta_max: float = np.inf
    history: tuple[float, ...] = ()
    history_len: int = 0

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("adaptive gain must be non-negative")
        if self.theta_max < 0:
            raise ValueError("theta_max must be non-negative")
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))

    @classmethod
    def zeros(cls, n: int, gain: float = 1.0, theta_max: float = np.inf, history_len: int = 0):
        return cls(np.zeros(n), gain, theta_max, (), history_len)


def _project(theta: Array, radius: float) -> Array:
    norm = float(np.linalg.norm(theta))
    if norm > radius:
        return theta * (radius / norm) if norm > 0 else theta
    return theta


def update_adaptive(est: AdaptiveEstimate, grad: Array, dt: float) -> AdaptiveEstimate:
    """One Euler step of ``dtheta/dt = -gain * dh/dx``, projected onto the ball."""
    theta = _project(euler_step(est.theta, -np.asarray(grad, dtype=np.float64), est.gain, dt), est.theta_max)
    hist = est.history
    if est.history_len:
        hist = (*hist, float(np.linalg.norm(theta)))[-est.history_len :]
    return replace(est, theta=theta, history=hist)


def admissibility_margin(
    f_candidate: Array,
    x: Array,
    spec: BarrierSpec,
    est: AdaptiveEstimate,
    eps_bar: float,
    alpha: float = 1.0,
) -> float:
    """``Phi + Pi`` for one candidate derivative at state ``x``.

    ``Pi = grad.f - |grad| eps_bar`` is the candidate's barrier rate eroded
    by the model-error bound; ``Phi = theta.grad + alpha h`` adds the
    adaptive estimate and a linear class-K term. The shipped barriers do not
    depend on ``theta`` so its partial derivative is zero.
    """
    if eps_bar < 0:
        raise ValueError("eps_bar must be non-negative")
    h, grad = barrier_eval(spec, x)
    dh_dtheta = np.zeros_like(grad)
    phi = float((est.theta + dh_dtheta) @ grad) + alpha * h
    pi = float(grad @ np.asarray(f_candidate, dtype=np.float64)) - float(np.linalg.norm(grad)) * eps_bar
    return phi + pi


def candidate_margins(
    batch: CandidateBatch,
    x: Array,
    barriers: Sequence[BarrierSpec],
    estimates: Sequence[AdaptiveEstimate],
    eps_bar: float,
    alpha: float = 1.0,
    steps: int = 1,
) -> Array:
    """Per-candidate margin, minimized over barriers (and over ``steps``
    predicted states when ``steps > 1``). Same arithmetic as
    :func:`admissibility_margin`, vectorized."""
    N = len(batch)
    out = np.full(N, np.inf)
    for spec, est in zip(barriers, estimates, strict=True):
        if steps <= 1:
            h, g = barrier_eval(spec, x)
            phi = float(est.theta @ g) + alpha * h
            m = phi + batch.derivs[:, 0] @ g - float(np.linalg.norm(g)) * eps_bar
        else:
            K = min(steps, batch.derivs.shape[1])
            h, g = spec.evaluate(batch.states[:, :K])
            m = (
                np.einsum("nkd,d->nk", g, est.theta)
                + alpha * h
                + np.einsum("nkd,nkd->nk", g, batch.derivs[:, :K])
                - np.linalg.norm(g, axis=-1) * eps_bar
            ).min(axis=1)
        out = np.minimum(out, m)
    return out


@dataclass(frozen=True)
class FilterDecision:
    index: int
    prediction: Trajectory
    controls: Array
    intervened: bool
    margin: float
    admissible: int
    fallback: bool = False


def _distances(batch: CandidateBatch, ref: int, mode: str) -> Array:
    if mode == "first_step":
        diff = batch.derivs[:, 0] - batch.derivs[ref, 0]
    elif mode == "trajectory":
        diff = (batch.states - batch.states[ref]).reshape(len(batch), -1)
    else:
        raise ValueError(f"unknown distance mode {mode!r}")
    return np.linalg.norm(diff, axis=1)


def filter_select(
    batch: CandidateBatch,
    optimal: int,
    x: Array,
    barriers: Sequence[BarrierSpec],
    estimates: Sequence[AdaptiveEstimate],
    eps_bar: float,
    alpha: float = 1.0,
    distance: str = "first_step",
    steps: int = 1,
    margins: Array | None = None,
) -> FilterDecision:
    """Pass the optimal candidate through if admissible, else the nearest
    admissible one; with no admissible candidate, the least-unsafe one.

    Ties in distance break by lower cost, then lower index. The fallback
    (empty admissible set) is flagged rather than raised so that a tick
    always yields an action.
    """
    N = len(batch)
    if not 0 <= optimal < N:
        raise MappingError(f"optimal index {optimal} outside batch of {N}")
    if margins is None:
        margins = candidate_margins(batch, x, barriers, estimates, eps_bar, alpha, steps)
    admissible = margins >= 0
    count = int(admissible.sum())

    def decide(i: int, intervened: bool, fallback: bool = False) -> FilterDecision:
        return FilterDecision(
            i, batch.prediction(i), batch.controls[i], intervened, float(margins[i]), count, fallback
        )

    if admissible[optimal]:
        return decide(optimal, False)
    costs = np.where(np.isfinite(batch.costs), batch.costs, np.inf)
    idx = np.arange(N)
    if count == 0:
        order = np.lexsort((idx, costs, -margins))
        return decide(int(order[0]), True, True)
    dist = _distances(batch, optimal, distance)
    cand = idx[admissible]
    order = np.lexsort((cand, costs[cand], dist[cand]))
    return decide(int(cand[order[0]]), True)


def reciprocal_map(batch: CandidateBatch, index: int) -> Array:
    """Control sequence paired with prediction ``index`` (pure lookup)."""
    if not 0 <= index < len(batch):
        raise MappingError(f"index {index} outside batch of {len(batch)}")
    return batch.controls[index]


class ReciprocalMap:
    """Bidirectional lookup between predictions and control sequences of one batch."""

    def __init__(self, batch: CandidateBatch):
        self.batch = batch
        self._by_pred: dict[bytes, int] = {}
        self._by_ctrl: dict[bytes, int] = {}
        for i in range(len(batch)):
            self._by_pred.setdefault(np.ascontiguousarray(batch.states[i]).tobytes(), i)
            self._by_ctrl.setdefault(np.ascontiguousarray(batch.controls[i]).tobytes(), i)

    def to_controls(self, prediction: Array) -> Array:
        key = np.ascontiguousarray(np.asarray(prediction, dtype=np.float64)).tobytes()
        if key not in self._by_pred:
            raise MappingError("prediction is not a member of the candidate batch")
        return self.batch.controls[self._by_pred[key]]

    def to_prediction(self, controls: Array) -> Array:
        key = np.ascontiguousarray(np.asarray(controls, dtype=np.float64)).tobytes()
        if key not in self._by_ctrl:
            raise MappingError("control sequence is not a member of the candidate batch")
        return self.batch.states[self._by_ctrl[key]]
