"""Barrier functions ``h(x)`` with analytic gradients.

Each barrier reads a point ``q = P @ x`` through a linear probe ``P``. With a
plain position probe ``q`` is the robot position; a lookahead probe adds a
velocity or heading term so that the barrier derivative depends on the
input for plants whose position is two integrations away from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from softctl.core import Array

KINDS = ("obstacle", "corridor", "band", "box")


def position_probe(n_state: int, index: tuple[int, ...]) -> Array:
    P = np.zeros((len(index), n_state))
    P[np.arange(len(index)), index] = 1.0
    return P


def lookahead_probe(n_state: int, index: tuple[int, ...], direction: tuple[int, ...], distance: float) -> Array:
    """``q = x[index] + distance * x[direction]``."""
    return position_probe(n_state, index) + distance * position_probe(n_state, direction)


def closest_on_polyline(q: Array, vertices: Array) -> tuple[Array, Array]:
    """Closest points and distances from ``q`` (M, d) to a polyline (S+1, d)."""
    a = vertices[:-1]
    ab = vertices[1:] - a
    L2 = np.einsum("sd,sd->s", ab, ab)
    L2 = np.where(L2 > 0, L2, 1.0)
    rel = q[:, None, :] - a[None]
    t = np.clip(np.einsum("msd,sd->ms", rel, ab) / L2, 0.0, 1.0)
    pts = a[None] + t[..., None] * ab[None]
    d2 = np.sum((q[:, None, :] - pts) ** 2, axis=-1)
    j = np.argmin(d2, axis=1)
    rows = np.arange(q.shape[0])
    return pts[rows, j], np.sqrt(d2[rows, j])


@dataclass(frozen=True)
class BarrierSpec:
    """Safe set ``{x : h(x) >= 0}`` of one of four shapes.

    * ``obstacle``: ``h = |q - c|^2 - r^2`` (outside a ball/cylinder).
    * ``corridor``: ``h = w^2 - (q[axis] - offset)^2`` (straight lane).
    * ``band``: ``h = w^2 - dist(q, path)^2`` (tube around a polyline).
    * ``box``: ``h = min_j min(q_j - lo_j, hi_j - q_j)``.
    """

    kind: str
    probe: Array
    name: str = ""
    center: tuple[float, ...] = ()
    radius: float = 0.0
    axis: int = 1
    offset: float = 0.0
    half_width: float = 0.0
    path: Array | None = None
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    scale: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        P = np.atleast_2d(np.asarray(self.probe, dtype=np.float64))
        object.__setattr__(self, "probe", P)
        if self.kind == "obstacle" and len(self.center) != P.shape[0]:
            raise ValueError("obstacle center must match probe dimension")
        if self.kind == "band":
            path = np.asarray(self.path, dtype=np.float64)
            if path.ndim != 2 or path.shape[1] != P.shape[0] or path.shape[0] < 2:
                raise ValueError("band path must be (>=2, probe_dim)")
            object.__setattr__(self, "path", path)
        if self.kind == "box" and not (len(self.lo) == len(self.hi) == P.shape[0]):
            raise ValueError("box bounds must match probe dimension")

    @property
    def n_state(self) -> int:
        return self.probe.shape[1]

    def point(self, x: Array) -> Array:
        return np.asarray(x, dtype=np.float64) @ self.probe.T

    def evaluate(self, x: Array) -> tuple[Array, Array]:
        """``h`` and ``dh/dx`` for states with arbitrary leading axes."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        q = self.point(x.reshape(-1, x.shape[-1]))
        h, g = self._geometry(q)
        grad = g @ self.probe
        return h.reshape(lead), grad.reshape(*lead, self.n_state)

    def value(self, x: Array) -> Array:
        return self.evaluate(x)[0]

    def signed_distance(self, x: Array) -> Array:
        """Euclidean clearance of ``q`` from the boundary, positive inside."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        q = self.point(x.reshape(-1, x.shape[-1]))
        if self.kind == "obstacle":
            d = np.linalg.norm(q - np.asarray(self.center), axis=1) - self.radius
        elif self.kind == "corridor":
            d = self.half_width - np.abs(q[:, self.axis] - self.offset)
        elif self.kind == "band":
            _, dist = closest_on_polyline(q, self.path)
            d = self.half_width - dist
        else:
            d, _ = self._geometry(q)
        return d.reshape(lead)

    def _geometry(self, q: Array) -> tuple[Array, Array]:
        if self.kind == "obstacle":
            r = q - np.asarray(self.center)
            return np.sum(r * r, axis=1) - self.radius**2, 2.0 * r
        if self.kind == "corridor":
            e = q[:, self.axis] - self.offset
            g = np.zeros_like(q)
            g[:, self.axis] = -2.0 * e
            return self.half_width**2 - e * e, g
        if self.kind == "band":
            c, dist = closest_on_polyline(q, self.path)
            return self.half_width**2 - dist**2, -2.0 * (q - c)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        faces = np.concatenate([q - lo, hi - q], axis=1)
        j = np.argmin(faces, axis=1)
        g = np.zeros((q.shape[0], 2 * q.shape[1]))
        g[np.arange(q.shape[0]), j] = 1.0
        g = g[:, : q.shape[1]] - g[:, q.shape[1] :]
        return faces[np.arange(q.shape[0]), j], g


def obstacle(center, radius: float, probe: Array, name: str = "") -> BarrierSpec:
    return BarrierSpec("obstacle", probe, name=name, center=tuple(map(float, center)), radius=float(radius))


def corridor(half_width: float, probe: Array, axis: int = 1, offset: float = 0.0, name: str = "") -> BarrierSpec:
    return BarrierSpec("corridor", probe, name=name, axis=axis, offset=offset, half_width=float(half_width))


def band(path, half_width: float, probe: Array, name: str = "", scale: float = 1.0) -> BarrierSpec:
    return BarrierSpec("band", probe, name=name, path=np.asarray(path, float), half_width=float(half_width), scale=scale)


def box(lo, hi, probe: Array, name: str = "") -> BarrierSpec:
    return BarrierSpec("box", probe, name=name, lo=tuple(map(float, lo)), hi=tuple(map(float, hi)))


def barrier_eval(spec: BarrierSpec, x) -> tuple[float, Array]:
    """Single-state ``(h, dh/dx)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    h, g = spec.evaluate(x[None])
    return float(h[0]), g[0]
