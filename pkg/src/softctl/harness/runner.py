"""Closed-loop execution of a scenario and the files it leaves behind."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from softctl.barriers import BarrierSpec
from softctl.config import to_dict
from softctl.core import Array, RngStream, derive_seed
from softctl.harness.baselines import PidGains, PidState, continuous_stimulation_step, pid_step
from softctl.harness.data import prepare_model
from softctl.harness.metrics import summarize
from softctl.harness.references import Reference
from softctl.harness.scenario import Scenario, build_barrier, heading_of
from softctl.harness.systems import System, make_system
from softctl.model import Checkpoint
from softctl.planner import TaskSpec, plan_step
from softctl.safety import (
    AdaptiveEstimate,
    barrier_eval,
    candidate_margins,
    filter_select,
    reciprocal_map,
    update_adaptive,
)

log = logging.getLogger(__name__)


@dataclass
class TrialResult:
    trial: int
    seed: int
    status: str
    records: list[dict]
    summary: dict
    tick_seconds: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def mean_tick(self) -> float:
        return float(np.mean(self.tick_seconds)) if self.tick_seconds else math.nan


@dataclass
class RunLog:
    scenario: Scenario
    trials: list[TrialResult]
    eps_bar: float
    model_meta: dict = field(default_factory=dict)

    def summary_rows(self) -> list[dict]:
        return [{"trial": t.trial, "seed": t.seed, "status": t.status, **t.summary} for t in self.trials]


@dataclass
class Context:
    """Everything a trial needs that does not change between trials."""

    scenario: Scenario
    system: System
    reference: Reference
    barriers: list[BarrierSpec]
    filters: list[BarrierSpec]
    penalties: tuple[BarrierSpec, ...]
    checkpoint: Checkpoint
    eps_bar: float
    theta_max: float


def build_context(scn: Scenario, ckpt: Checkpoint) -> Context:
    system = make_system(scn.plant.kind, scn.plant.params, scn.plant.control_lo, scn.plant.control_hi)
    ref = Reference(scn.task.reference)
    specs = [build_barrier(b, system, ref) for b in scn.barriers]
    filters = [s for s in specs if s.meta["role"] in ("filter", "both")]
    by_name = {s.name: s for s in specs}
    penalties = tuple(by_name[n] for n in scn.task.penalties)
    eps = ckpt.bound.value if ckpt.bound is not None else 0.0
    tmax = scn.filter.theta_max if scn.filter.theta_max is not None else scn.filter.theta_max_factor * eps
    return Context(scn, system, ref, specs, filters, penalties, ckpt, eps, tmax)


def summarize_trial(scn: Scenario, specs: list[BarrierSpec], records: list[dict]) -> dict:
    m = scn.metrics
    return summarize(
        records, specs, m.tsf, m.asf, m.corridor, track=m.track_threshold is not None or scn.task.reference.kind != "constant"
    )


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class _Tracker:
    """Produces the per-tick reference window and the tracking distance."""

    def __init__(self, ctx: Context):
        self.ctx = ctx
        self.ref = ctx.reference
        self.s = 0.0
        cfg = self.ref.config
        self.follow = cfg.mode == "follow"
        self.window = max(4.0 * cfg.lead, 0.25 * self.ref.length, 1e-9)

    def update(self, pos: Array) -> None:
        if self.follow:
            self.s = self.ref.project(pos, self.s, self.window)

    def window_points(self, t: float, H: int, dt: float) -> Array:
        steps = np.arange(1, H + 1) * dt
        if self.follow:
            s = self.s + self.ref.config.lead + self.ref.nominal_speed() * steps
            return self.ref.at_arclength(s)
        return self.ref.at(t + steps)

    def current(self, t: float) -> Array:
        if self.follow:
            return self.ref.at_arclength(np.array(self.s))
        return self.ref.at(np.array(t))

    def carrot(self, pos: Array, lookahead: float) -> Array:
        s = self.ref.project(pos, self.s if self.follow else None, self.window if self.follow else None)
        return self.ref.at_arclength(np.array(s + lookahead))


def _task(ctx: Context, ref_pts: Array, previous: Array | None) -> TaskSpec:
    tc = ctx.scenario.task
    m = ctx.system.n_control
    d = len(tc.tracked)
    return TaskSpec(
        tracked=tuple(tc.tracked),
        reference=ref_pts[:, :d],
        track_weight=np.asarray(tc.track_weight),
        input_weight=np.broadcast_to(np.asarray(tc.input_weight, float), (m,)),
        rate_weight=np.broadcast_to(np.asarray(tc.rate_weight, float), (m,)),
        input_ref=None if tc.input_ref is None else np.asarray(tc.input_ref, float),
        penalties=ctx.penalties,
        penalty_weight=tc.penalty_weight,
        penalty_margin=tc.penalty_margin,
        terminal_weight=None if tc.terminal_weight is None else np.asarray(tc.terminal_weight),
        previous_input=None if previous is None else previous[0],
    )


def run_trial(ctx: Context, trial: int, carry: int = 0) -> TrialResult:
    scn = ctx.scenario
    seed = derive_seed(scn.seed, trial)
    root = RngStream(seed)
    rng_init, rng_plant, rng_plan = root.child(0), root.child(1), root.child(2)
    system, dt = ctx.system, scn.dt
    params = ctx.checkpoint.params
    tracker = _Tracker(ctx)
    start = ctx.reference.path[0] if tracker.follow else ctx.reference.at(np.array(0.0))
    fatigue = carry if scn.plant.kind == "cyborg" else scn.plant.fatigue_cycles
    records: list[dict] = []
    ticks: list[float] = []
    status = "ok"
    try:
        plant = system.initial(scn.plant.initial, start, heading_of(ctx.reference.path), rng_init, fatigue)
        estimates = [
            AdaptiveEstimate.zeros(system.n_state, scn.filter.gain, ctx.theta_max) for _ in ctx.filters
        ]
        previous = None
        if scn.plant.initial.control is not None:
            hold = system.bounds.clamp(np.asarray(scn.plant.initial.control, float))
            previous = np.tile(hold, (scn.planner.horizon, 1))
        pid_state = PidState()
        stim_base = system.stimulations(plant)
        for k in range(scn.steps):
            t = k * dt
            x = system.observe(plant)
            pos = system.position(x)
            tracker.update(pos)
            rec_extra: dict = {}
            t0 = time.perf_counter()
            if scn.controller in ("framework", "no-acbf"):
                pts = tracker.window_points(t, scn.planner.horizon, dt)
                task = _task(ctx, pts, previous)
                batch = plan_step(params, x, task, scn.planner, system.bounds, dt, rng_plan, previous)
                margins = None
                if ctx.filters:
                    margins = candidate_margins(
                        batch, x, ctx.filters, estimates, ctx.eps_bar, scn.filter.alpha, scn.filter.steps
                    )
                if scn.controller == "framework" and ctx.filters:
                    dec = filter_select(
                        batch, batch.optimal, x, ctx.filters, estimates, ctx.eps_bar,
                        scn.filter.alpha, scn.filter.distance, scn.filter.steps, margins,
                    )
                    idx, intervened, fallback, admissible = dec.index, dec.intervened, dec.fallback, dec.admissible
                else:
                    idx, intervened, fallback = batch.optimal, False, False
                    admissible = int((margins >= 0).sum()) if margins is not None else len(batch)
                seq = reciprocal_map(batch, idx)
                u = seq[0].copy()
                previous = seq
                margin = float(margins[idx]) if margins is not None else math.nan
                rec_extra = {"cost": float(batch.costs[batch.optimal]), "selected": int(idx)}
            elif scn.controller == "pid":
                u, pid_state = _pid_control(ctx, tracker, x, pid_state, dt)
                intervened = fallback = False
                admissible, margin = 0, math.nan
            else:
                u = _continuous_control(ctx, x)
                intervened = fallback = False
                admissible, margin = 0, math.nan
            ticks.append(time.perf_counter() - t0)
            ref_now = tracker.current(t)
            plant, stim = system.actuate(plant, u, dt, rng_plant)
            if scn.controller == "framework" and scn.filter.adaptive:
                estimates = [update_adaptive(e, barrier_eval(s, x)[1], dt) for e, s in zip(estimates, ctx.filters)]
            tc = scn.task.tracked
            if tracker.follow:
                track = float(np.linalg.norm(pos[: ref_now.shape[-1]] - ref_now[: pos.shape[-1]]))
            else:
                track = float(np.linalg.norm(x[list(tc)] - ref_now[: len(tc)]))
            records.append(
                {
                    "k": k,
                    "t": t,
                    "x": x.tolist(),
                    "u": np.asarray(u, float).tolist(),
                    "h": {s.name: float(s.value(x[None])[0]) for s in ctx.barriers},
                    "margin": margin,
                    "intervened": bool(intervened),
                    "fallback": bool(fallback),
                    "admissible": int(admissible),
                    "stimulus": int(stim),
                    "track_dist": track,
                    "theta": [float(np.linalg.norm(e.theta)) for e in estimates],
                    **rec_extra,
                }
            )
        final_count = system.stimulations(plant) - stim_base
    except Exception as exc:  # a failed trial is reported, the run continues
        log.warning("trial %d aborted: %s", trial, exc)
        status = f"error: {type(exc).__name__}: {exc}"
        final_count = 0
    summary = summarize_trial(scn, ctx.barriers, records)
    res = TrialResult(trial, seed, status, records, summary, ticks)
    res.final_count = final_count + carry  # type: ignore[attr-defined]
    return res


def _pid_control(ctx: Context, tracker: _Tracker, x: Array, state: PidState, dt: float):
    scn = ctx.scenario
    cfg = scn.pid
    system = ctx.system
    if system.kind != "fish":
        raise ValueError("the PID baseline drives the fish heading")
    pos = system.position(x)
    carrot = tracker.carrot(pos, cfg.lookahead)
    desired = math.atan2(carrot[1] - pos[1], carrot[0] - pos[0])
    psi = math.atan2(x[3], x[2])
    err = _wrap(desired - psi)
    limit = cfg.limit if cfg.limit is not None else system.params.bias_max
    bias, state = pid_step(err, PidGains(cfg.kp, cfg.ki, cfg.kd), state, limit, dt)
    lo, hi = system.bounds.lo[1], system.bounds.hi[1]
    amp = cfg.amplitude if cfg.amplitude is not None else 0.5 * (lo + hi)
    return np.array([bias, amp]), state


def _continuous_control(ctx: Context, x: Array) -> Array:
    system = ctx.system
    if system.kind != "cyborg":
        raise ValueError("continuous stimulation drives the cyborg walker")
    cfg = ctx.scenario.continuous
    corridor = next((b for b in ctx.barriers if b.kind == "corridor"), None)
    offset = corridor.offset if corridor is not None else 0.0
    psi = math.atan2(x[3], x[2])
    # steer back toward the corridor centreline over a short lookahead
    desired = math.atan2(-(x[1] - offset), cfg.lookahead)
    stim = continuous_stimulation_step(_wrap(desired - psi), cfg.threshold)
    return np.array([float(stim.value)])


def run_scenario(
    scn: Scenario,
    cache_dir: str | Path | None = None,
    checkpoint: str | Path | None = None,
    ckpt: Checkpoint | None = None,
) -> RunLog:
    """Prepare the model, then run every trial of ``scn``.

    Trials are independent unless the plant carries state over between them
    (``plant.carry_over``), in which case they run in order.
    """
    if ckpt is None:
        ckpt = prepare_model(scn, cache_dir, checkpoint)
    ctx = build_context(scn, ckpt)
    if scn.plant.carry_over:
        results, carry = [], 0
        for i in range(scn.trials):
            r = run_trial(ctx, i, carry)
            carry = r.final_count  # type: ignore[attr-defined]
            results.append(r)
    elif scn.trial_workers > 1:
        with ThreadPoolExecutor(max_workers=scn.trial_workers) as pool:
            results = list(pool.map(lambda i: run_trial(ctx, i), range(scn.trials)))
    else:
        results = [run_trial(ctx, i) for i in range(scn.trials)]
    return RunLog(scn, results, ctx.eps_bar, dict(ckpt.meta))


# --------------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(rows: list[dict]) -> str:
    cols: list[str] = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()


def log_name(scn: Scenario, result: TrialResult) -> str:
    return f"{scn.name}_{result.trial}_{result.seed}.jsonl"


def write_outputs(run: RunLog, out: str | Path) -> dict[str, Path]:
    """Per-trial JSONL logs, ``summary.csv``, ``timing.csv`` and the config snapshot."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scn = run.scenario
    paths = {}
    for r in run.trials:
        p = out / log_name(scn, r)
        with open(p, "w", encoding="utf-8") as fh:
            for rec, tick in zip(r.records, r.tick_seconds):
                fh.write(json.dumps({**rec, "tick_s": tick}) + "\n")
        paths[p.name] = p
    paths["summary"] = out / "summary.csv"
    paths["summary"].write_text(summary_csv(run.summary_rows()), encoding="utf-8")
    timing = [{"trial": r.trial, "seed": r.seed, "mean_tick_s": r.mean_tick,
               "max_tick_s": max(r.tick_seconds, default=math.nan)} for r in run.trials]
    paths["timing"] = out / "timing.csv"
    paths["timing"].write_text(summary_csv(timing), encoding="utf-8")
    paths["config"] = out / "resolved_config.yaml"
    write_snapshot(scn, paths["config"])
    return paths


def write_snapshot(scn: Scenario, path: Path) -> None:
    from softctl.config import dump_yaml

    dump_yaml(to_dict(scn), path)


def read_log(path: str | Path) -> list[dict]:
    recs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rec.pop("tick_s", None)
                recs.append(rec)
    return recs


def with_controller(scn: Scenario, controller: str) -> Scenario:
    return replace(scn, controller=controller)
