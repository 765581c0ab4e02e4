"""Reference paths and their timing laws.

A reference is a polyline ``path`` plus a rule mapping time to arc length.
``timed`` references move along the path on their own clock; ``follow``
references place the target a fixed lead ahead of the robot's projection,
which keeps a swimmer that has been pushed off course from chasing a target
it can no longer catch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from softctl.core import Array

KINDS = ("constant", "square", "stroke", "figure8", "uturn", "circle", "polyline")


@dataclass(frozen=True)
class ReferenceConfig:
    kind: str = "constant"
    mode: str = "timed"
    point: tuple[float, ...] = (0.0, 0.0)
    center: tuple[float, ...] = (0.0, 0.0)
    size: float = 0.04
    axis: int = 1
    period: float | None = None
    speed: float | None = None
    max_speed: float | None = None
    ramp_time: float = 0.0
    straight: float = 1.0
    lead: float = 0.0
    vertices: tuple[tuple[float, ...], ...] = ()
    resolution: int = 96

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.mode not in ("timed", "follow"):
            raise ValueError("reference mode must be 'timed' or 'follow'")
        if self.kind == "polyline" and len(self.vertices) < 2:
            raise ValueError("polyline reference needs at least two vertices")


def _arc(center: Array, radius: float, a0: float, a1: float, n: int) -> Array:
    a = np.linspace(a0, a1, n)
    return center + radius * np.stack([np.cos(a), np.sin(a)], axis=1)


def build_path(cfg: ReferenceConfig) -> tuple[Array, bool]:
    """Vertices ``(M, d)`` and whether the path closes on itself."""
    c = np.asarray(cfg.center, dtype=np.float64)
    a = cfg.size
    n = cfg.resolution
    if cfg.kind == "constant":
        p = np.asarray(cfg.point, dtype=np.float64)
        return np.stack([p, p]), False
    if cfg.kind == "square":
        # start halfway up the first side so the trial does not begin on a corner
        pts = np.zeros((6, len(c)))
        pts[:, :2] = [[a, 0.0], [a, a], [-a, a], [-a, -a], [a, -a], [a, 0.0]]
        return c + pts, True
    if cfg.kind == "stroke":
        e = np.zeros(len(c))
        e[cfg.axis] = a
        return np.stack([c - e, c + e]), False
    if cfg.kind == "figure8":
        right = _arc(c + [a, 0.0], a, math.pi, -math.pi, 2 * n)
        left = _arc(c - [a, 0.0], a, 0.0, 2.0 * math.pi, 2 * n)
        return np.concatenate([right, left[1:]]), True
    if cfg.kind == "uturn":
        r = a
        leg_in = np.stack([c + [-cfg.straight, 0.0], c], axis=0)
        turn = _arc(c + [0.0, r], r, -math.pi / 2, math.pi / 2, n)
        leg_out = np.stack([c + [0.0, 2 * r], c + [-cfg.straight, 2 * r]])
        return np.concatenate([leg_in[:1], turn, leg_out[1:]]), False
    if cfg.kind == "circle":
        return _arc(c, a, -math.pi / 2, 1.5 * math.pi, 4 * n), True
    return np.asarray(cfg.vertices, dtype=np.float64), False


@dataclass
class Reference:
    """Arc-length parameterized polyline with an optional timing law."""

    config: ReferenceConfig
    path: Array = field(init=False)
    closed: bool = field(init=False)
    cum: Array = field(init=False)

    def __post_init__(self):
        self.path, self.closed = build_path(self.config)
        seg = np.linalg.norm(np.diff(self.path, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    @property
    def dim(self) -> int:
        return self.path.shape[1]

    def nominal_speed(self) -> float:
        cfg = self.config
        if cfg.speed is not None:
            return cfg.speed
        if cfg.period is not None and cfg.kind != "stroke":
            return self.length / cfg.period
        return 0.0

    def arclength(self, t: Array) -> Array:
        """Distance travelled along the path after time ``t``."""
        t = np.asarray(t, dtype=np.float64)
        cfg = self.config
        if cfg.max_speed is not None:
            T, v = cfg.ramp_time, cfg.max_speed
            if T <= 0:
                return v * t
            tt = np.minimum(t, T)
            ramp = 0.5 * v * (tt - (T / math.pi) * np.sin(math.pi * tt / T))
            return ramp + v * np.maximum(t - T, 0.0)
        return self.nominal_speed() * t

    def speed_at(self, t: float) -> float:
        cfg = self.config
        if cfg.max_speed is not None:
            if cfg.ramp_time <= 0 or t >= cfg.ramp_time:
                return cfg.max_speed
            return 0.5 * cfg.max_speed * (1.0 - math.cos(math.pi * t / cfg.ramp_time))
        return self.nominal_speed()

    def at_arclength(self, s: Array) -> Array:
        s = np.asarray(s, dtype=np.float64)
        L = self.length
        if L <= 0:
            return np.broadcast_to(self.path[0], (*s.shape, self.dim)).copy()
        s = np.mod(s, L) if self.closed else np.clip(s, 0.0, L)
        out = np.empty((*s.shape, self.dim))
        for j in range(self.dim):
            out[..., j] = np.interp(s, self.cum, self.path[:, j])
        return out

    def at(self, t: Array) -> Array:
        """Target positions at times ``t`` for a timed reference."""
        t = np.asarray(t, dtype=np.float64)
        cfg = self.config
        if cfg.kind == "constant":
            return np.broadcast_to(self.path[0], (*t.shape, self.dim)).copy()
        if cfg.kind == "stroke":
            period = cfg.period if cfg.period is not None else 1.0
            phase = np.sin(2.0 * math.pi * t / period)
            return np.asarray(cfg.center) + np.multiply.outer(phase, self.path[1] - np.asarray(cfg.center))
        return self.at_arclength(self.arclength(t))

    def project(self, q: Array, s_hint: float | None = None, window: float | None = None) -> float:
        """Arc length of the point on the path closest to ``q``.

        With ``s_hint`` and ``window`` the search is restricted to
        ``[s_hint - window/4, s_hint + window]`` so a figure-eight crossing does
        not make the projection jump between lobes.
        """
        q = np.asarray(q, dtype=np.float64)[: self.dim]
        a, b = self.path[:-1], self.path[1:]
        ab = b - a
        L2 = np.einsum("sd,sd->s", ab, ab)
        L2 = np.where(L2 > 0, L2, 1.0)
        tt = np.clip(np.einsum("sd,sd->s", q - a, ab) / L2, 0.0, 1.0)
        pts = a + tt[:, None] * ab
        d2 = np.sum((pts - q) ** 2, axis=1)
        s = self.cum[:-1] + tt * np.sqrt(np.einsum("sd,sd->s", ab, ab))
        if s_hint is not None and window is not None:
            ds = s - s_hint
            if self.closed:
                L = self.length
                ds = (ds + 0.5 * L) % L - 0.5 * L
            ok = (ds >= -0.25 * window) & (ds <= window)
            if ok.any():
                d2 = np.where(ok, d2, np.inf)
                j = int(np.argmin(d2))
                return float(s_hint + ds[j])
        return float(s[int(np.argmin(d2))])
