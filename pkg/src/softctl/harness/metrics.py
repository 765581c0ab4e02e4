"""Per-state safety measures and the trial summary built from run records."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from softctl.barriers import BarrierSpec
from softctl.core import Array, Trajectory


def tsf(x: Array, region: BarrierSpec) -> float:
    """Tracking safety: scaled clearance from the band boundary, positive inside."""
    if region.kind != "band":
        raise ValueError("tsf needs a band barrier")
    return float(region.scale * region.signed_distance(np.asarray(x, dtype=np.float64)[None])[0])


def asf(x: Array, obstacle: BarrierSpec) -> float:
    """Avoidance safety: distance from the probed point to the obstacle surface."""
    if obstacle.kind != "obstacle":
        raise ValueError("asf needs an obstacle barrier")
    return float(obstacle.signed_distance(np.asarray(x, dtype=np.float64)[None])[0])


def safety_ratio(trajectory: Trajectory | Array, corridor: BarrierSpec) -> float:
    """Fraction of recorded states inside the corridor (boundary counts as inside)."""
    states = trajectory.states if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("trajectory must contain at least one state")
    q = corridor.point(states)
    inside = np.abs(q[:, corridor.axis] - corridor.offset) <= corridor.half_width
    return float(np.mean(inside))


def _min(values: Sequence[float]) -> float:
    return float(min(values)) if len(values) else math.nan


def summarize(
    records: Sequence[dict],
    barriers: Sequence[BarrierSpec],
    tsf_name: str | None = None,
    asf_names: Sequence[str] = (),
    corridor_name: str | None = None,
    track: bool = False,
) -> dict:
    """Trial summary computed purely from logged records.

    Columns are fixed so the summary can be recomputed from a JSONL log and
    compared for equality with the stored one.
    """
    by_name = {b.name: b for b in barriers}
    out: dict = {"steps": len(records)}
    for b in barriers:
        out[f"min_h_{b.name}"] = _min([r["h"][b.name] for r in records])
    states = np.array([r["x"] for r in records]) if records else np.zeros((0, 0))
    if tsf_name is not None:
        out["min_tsf"] = _min([tsf(x, by_name[tsf_name]) for x in states])
    if asf_names:
        per = {n: _min([asf(x, by_name[n]) for x in states]) for n in asf_names}
        for n, v in per.items():
            out[f"min_dist_{n}"] = v
        out["min_asf"] = _min(list(per.values()))
    if corridor_name is not None:
        out["safety_ratio"] = safety_ratio(states, by_name[corridor_name]) if len(states) else math.nan
    out["stimulations"] = int(sum(r.get("stimulus", 0) != 0 for r in records))
    out["interventions"] = int(sum(bool(r["intervened"]) for r in records))
    out["fallbacks"] = int(sum(bool(r.get("fallback", False)) for r in records))
    out["max_abs_u"] = float(max((max(abs(v) for v in r["u"]) for r in records), default=0.0))
    if track:
        out["mean_track_dist"] = float(np.mean([r["track_dist"] for r in records])) if records else math.nan
    return out
