"""Acceptance criteria, one test each, with a pass/fail line per criterion.

Scenario criteria share trained models through a session cache. One-time
model training is timed separately from each criterion's runtime budget.
The determinism criterion reruns every other criterion and compares the
summary tables byte for byte.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, linear_dataset, random_barrier, random_batch
from softctl.core import RngStream
from softctl.harness.data import prepare_model
from softctl.harness.metrics import asf
from softctl.harness.runner import build_context, run_scenario, summary_csv, with_controller
from softctl.harness.scenario import load_scenario, resolve_scenario_path
from softctl.model import (
    Architecture,
    TrainConfig,
    calibrate_error_bound,
    init_params,
    loss_and_grad,
    make_windows,
    one_step_residuals,
    train,
)
from softctl.planner import exponential_weights, select_optimal
from softctl.plants import FishParams
from softctl.safety import AdaptiveEstimate, admissibility_margin, filter_select, reciprocal_map

pytestmark = pytest.mark.acceptance

TABLES: dict[int, str] = {}


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def table(rows: list[dict]) -> str:
    return summary_csv(rows)


@pytest.fixture(scope="session")
def cache(tmp_path_factory):
    return os.environ.get("SOFTCTL_CACHE") or str(tmp_path_factory.mktemp("models"))


def scenario(name, **over):
    scn = load_scenario(resolve_scenario_path(name))
    return replace(scn, **over) if over else scn


@pytest.fixture(scope="session")
def trained(cache):
    """Train (or load) every model the scenario criteria use, once."""
    t0 = time.perf_counter()
    for name in ("arm_square", "fish_figure8", "cyborg_corridor"):
        prepare_model(scenario(name), cache)
    dt = time.perf_counter() - t0
    print(f"model preparation took {dt:.1f} s")
    return cache


# ---------------------------------------------------------------- criterion 1


def criterion_1():
    rng = RngStream(1001)
    rows = []
    worst = {"weights": 0.0, "margin": 0.0}
    mism = {"select": 0, "filter": 0, "map": 0}
    branches = {"pass": 0, "nearest": 0, "fallback": 0}
    N = 1000
    for i in range(N):
        n = 2 + int(rng.uniform() * 63)
        H = 1 + int(rng.uniform() * 5)
        beta = 0.05 + 5 * float(rng.uniform())
        costs = np.round(rng.normal(n) * 10, int(rng.uniform() * 3))
        w = exponential_weights(costs, beta)
        worst["weights"] = max(worst["weights"], float(np.max(np.abs(w - oracles.weights(list(costs), beta)))))
        mism["select"] += select_optimal(costs) != oracles.argmin(list(costs))

        spec, kind, P, geom = random_barrier(rng, 4)
        x, f, th = rng.normal(4), rng.normal(4), rng.normal(4)
        eps, alpha = float(rng.uniform()), 0.1 + 5 * float(rng.uniform())
        m = admissibility_margin(f, x, spec, AdaptiveEstimate(th), eps, alpha)
        mo = oracles.margin(list(f), list(x), list(th), eps, alpha, kind, P, **geom)
        worst["margin"] = max(worst["margin"], abs(m - mo))

        batch = random_batch(rng, n, H)
        opt = int(rng.uniform() * n)
        est = AdaptiveEstimate(0.3 * rng.normal(4))
        d = filter_select(batch, opt, x, [spec], [est], eps, alpha)
        margins = [
            oracles.margin(list(batch.derivs[j, 0]), list(x), list(est.theta), eps, alpha, kind, P, **geom)
            for j in range(n)
        ]
        want = oracles.select(margins, batch.derivs[:, 0].tolist(), list(batch.costs), opt)
        mism["filter"] += (d.index, d.intervened, d.fallback) != want
        branches["fallback" if want[2] else "nearest" if want[1] else "pass"] += 1

        j = int(rng.uniform() * n)
        u = reciprocal_map(batch, j)
        mism["map"] += not np.array_equal(u, oracles.lookup(batch.controls, batch.states, batch.states[j]))
    rows.append({"instances": N, **{f"mismatch_{k}": v for k, v in mism.items()},
                 "max_err_weights": worst["weights"], "max_err_margin": worst["margin"], **branches})
    ok = worst["margin"] <= 1e-9 and worst["weights"] <= 1e-12 and not any(mism.values())
    ok = ok and min(branches.values()) > 0
    return ok, rows


def test_criterion_1_equation_conformance():
    t0 = time.perf_counter()
    ok, rows = criterion_1()
    elapsed = time.perf_counter() - t0
    TABLES[1] = table(rows)
    r = rows[0]
    ok = ok and elapsed <= 60
    report(1, "equation conformance", ok,
           f"{r['instances']} instances/op, index mismatches select={r['mismatch_select']} filter={r['mismatch_filter']} "
           f"map={r['mismatch_map']}, max margin err {r['max_err_margin']:.2e}, max weight err {r['max_err_weights']:.2e}, "
           f"branches pass/nearest/fallback={r['pass']}/{r['nearest']}/{r['fallback']}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- criterion 2


def _passivity_and_minimality():
    rng = RngStream(2002)
    counts = {"passive": 0, "nearest": 0, "fallback": 0, "passivity_violations": 0, "minimality_violations": 0}
    for _ in range(10_000):
        n = 2 + int(rng.uniform() * 31)
        batch = random_batch(rng, n, 2)
        spec = random_barrier(rng, 4)[0]
        x = rng.normal(4)
        est = AdaptiveEstimate(0.3 * rng.normal(4))
        d = filter_select(batch, batch.optimal, x, [spec], [est], 0.2, 2.0)
        margins = np.array([admissibility_margin(batch.derivs[j, 0], x, spec, est, 0.2, 2.0) for j in range(n)])
        admissible = margins >= 0
        if admissible[batch.optimal]:
            counts["passive"] += 1
            same = (
                not d.intervened
                and d.index == batch.optimal
                and np.array_equal(d.controls, batch.controls[batch.optimal])
                and np.array_equal(d.prediction.states, batch.states[batch.optimal])
            )
            counts["passivity_violations"] += not same
        elif admissible.any():
            counts["nearest"] += 1
            dist = np.linalg.norm(batch.derivs[:, 0] - batch.derivs[batch.optimal, 0], axis=1)
            beaten = admissible & (dist < dist[d.index])
            counts["minimality_violations"] += bool(beaten.any()) or not admissible[d.index]
        else:
            counts["fallback"] += 1
            counts["minimality_violations"] += not d.fallback
    return counts


def test_criterion_2_passivity_and_minimality():
    t0 = time.perf_counter()
    c = _passivity_and_minimality()
    elapsed = time.perf_counter() - t0
    TABLES[2] = table([c])
    ok = c["passivity_violations"] == 0 and c["minimality_violations"] == 0 and c["passive"] > 0 and c["nearest"] > 0
    ok = ok and elapsed <= 60
    report(2, "filter passivity and minimality", ok,
           f"10000 batches ({c['passive']} admissible optimal, {c['nearest']} intervened, {c['fallback']} fallback), "
           f"violations passivity={c['passivity_violations']} minimality={c['minimality_violations']}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- criterion 3


def criterion_3():
    data = linear_dataset(n_traj=16, steps=80, seed=3, val=4)
    res = train(data, Architecture((16, 16)), TrainConfig(epochs=60, learning_rate=0.01, batch_size=64, horizon=5, seed=3))
    val = data.split("validation")
    bound = calibrate_error_bound(res.params, val, 0.05)
    resid = one_step_residuals(res.params, val, 0.05)
    dominated = int(np.sum(resid <= bound.value))

    p = init_params(Architecture((8, 8)), 2, 1, RngStream(33))
    win = make_windows(data.split("train"), 4, 5)
    scale = np.ones(2)
    _, grads = loss_and_grad(p, win, 0.05, scale)
    rng = RngStream(34)
    arrays = p.arrays
    worst = 0.0
    for _ in range(20):
        a = int(rng.uniform() * len(arrays)) % len(arrays)
        flat = arrays[a].reshape(-1)
        j = int(rng.uniform() * flat.size) % flat.size
        old = flat[j]
        flat[j] = old + 1e-6
        lp, _ = loss_and_grad(p, win, 0.05, scale, need_grad=False)
        flat[j] = old - 1e-6
        lm, _ = loss_and_grad(p, win, 0.05, scale, need_grad=False)
        flat[j] = old
        fd = (lp - lm) / 2e-6
        g = grads[a].reshape(-1)[j]
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
    row = {"samples": resid.size, "dominated": dominated, "eps_bar": bound.value, "max_residual": float(resid.max()),
           "grad_probes": 20, "max_grad_rel_err": worst}
    return dominated == resid.size and worst <= 1e-4, [row]


def test_criterion_3_model_certification():
    t0 = time.perf_counter()
    ok, rows = criterion_3()
    elapsed = time.perf_counter() - t0
    TABLES[3] = table(rows)
    r = rows[0]
    ok = ok and elapsed <= 300
    report(3, "model certification", ok,
           f"{r['dominated']}/{r['samples']} validation residuals <= eps_bar {r['eps_bar']:.3g} "
           f"(max {r['max_residual']:.3g}), gradient FD max rel err {r['max_grad_rel_err']:.1e} at 20 probes, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------ scenario runs


def run(name, cache, controller=None):
    scn = scenario(name)
    if controller is not None:
        scn = with_controller(scn, controller)
    return run_scenario(scn, cache)


def all_h(log):
    return [h for t in log.trials for r in t.records for h in r["h"].values()]


def criterion_4(cache):
    sq = run("arm_square", cache)
    ob = run("arm_obstacle", cache)
    spec = {s.name: s for s in build_context(ob.scenario, prepare_model(ob.scenario, cache)).barriers}["post"]
    near = []
    for t in ob.trials:
        near.append(sum(1 for r in t.records if r["intervened"] and asf(np.array(r["x"]), spec) <= 0.02))
    ok_sq = all(t.ok and t.summary["min_tsf"] > 0 for t in sq.trials) and len(sq.trials) == 10
    ok_ob = all(t.ok and t.summary["min_asf"] > 0 for t in ob.trials) and len(ob.trials) == 10 and any(near)
    tables = summary_csv(sq.summary_rows()) + summary_csv(ob.summary_rows())
    return ok_sq, ok_ob, sq, ob, near, tables


def test_criterion_4_arm_tracking_and_avoidance(trained):
    t0 = time.perf_counter()
    ok_sq, ok_ob, sq, ob, near, TABLES[4] = criterion_4(trained)
    elapsed = time.perf_counter() - t0
    ok = ok_sq and ok_ob and elapsed <= 600
    tsf_sq = [t.summary["min_tsf"] for t in sq.trials]
    asf_ob = [t.summary["min_asf"] for t in ob.trials]
    tsf_ob = [t.summary["min_tsf"] for t in ob.trials]
    report(4, "arm square / obstacle", ok,
           f"square min TSF {min(tsf_sq):.2f}..{max(tsf_sq):.2f} over {len(sq.trials)} trials; obstacle min ASF "
           f"{min(asf_ob) * 1000:.2f}..{max(asf_ob) * 1000:.2f} mm, TSF relaxed to {min(tsf_ob):.2f}, "
           f"intervened ticks within 20 mm of the post per trial {near}, {elapsed:.0f} s")
    assert ok


def criterion_5(cache):
    log = run("fish_figure8", cache)
    bmax = FishParams().bias_max
    dists = [min(t.summary["min_dist_left"], t.summary["min_dist_right"]) for t in log.trials]
    bias = max(abs(r["u"][0]) for t in log.trials for r in t.records)
    ok = len(log.trials) == 10 and all(t.ok for t in log.trials) and min(dists) > 0.10 and bias <= bmax
    return ok, dists, bias, bmax, summary_csv(log.summary_rows())


def test_criterion_5_fish_two_obstacles(trained):
    t0 = time.perf_counter()
    ok, dists, bias, bmax, TABLES[5] = criterion_5(trained)
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed <= 600
    report(5, "fish two obstacles", ok,
           f"min obstacle distance {min(dists):.3f}..{max(dists):.3f} m (> 0.10) over {len(dists)} trials, "
           f"max |bias| {bias:.3f} <= {bmax}, {elapsed:.0f} s")
    assert ok


def criterion_6(cache):
    scn = scenario("cyborg_corridor")
    assert (scn.plant.params or {}).get("habituation", True)
    fw = run("cyborg_corridor", cache)
    cs = run("cyborg_corridor", cache, "continuous")
    r_fw = [t.summary["safety_ratio"] for t in fw.trials]
    r_cs = [t.summary["safety_ratio"] for t in cs.trials]
    s_fw = sum(t.summary["stimulations"] for t in fw.trials)
    s_cs = sum(t.summary["stimulations"] for t in cs.trials)
    ok = (
        len(r_fw) >= 8 and len(r_cs) >= 8
        and all(t.ok for t in fw.trials + cs.trials)
        and np.mean(r_fw) > np.mean(r_cs) and s_fw < s_cs and np.mean(r_fw) >= 0.95
    )
    return ok, r_fw, r_cs, s_fw, s_cs, summary_csv(fw.summary_rows()) + summary_csv(cs.summary_rows())


def test_criterion_6_cyborg_corridor(trained):
    t0 = time.perf_counter()
    ok, r_fw, r_cs, s_fw, s_cs, TABLES[6] = criterion_6(trained)
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed <= 600
    report(6, "cyborg corridor", ok,
           f"safety ratio framework {np.mean(r_fw):.3f} vs continuous {np.mean(r_cs):.3f}; stimulations "
           f"{s_fw} vs {s_cs} over {len(r_fw)} trials each (habituation on), {elapsed:.0f} s")
    assert ok


def criterion_7(cache):
    na = run("arm_fatigue", cache, "no-acbf")
    fw = run("arm_fatigue", cache, "framework")
    assert na.scenario.plant.fatigue_cycles == 3000
    h_na, h_fw = all_h(na), all_h(fw)
    seeds_match = [t.seed for t in na.trials] == [t.seed for t in fw.trials]
    ok = seeds_match and min(h_na) < 0 and min(h_fw) >= 0 and all(t.ok for t in na.trials + fw.trials)
    neg = sum(1 for t in na.trials if min(h for r in t.records for h in r["h"].values()) < 0)
    fb = sum(t.summary["fallbacks"] for t in fw.trials)
    return ok, min(h_na), min(h_fw), neg, len(na.trials), fb, summary_csv(na.summary_rows()) + summary_csv(fw.summary_rows())


def test_criterion_7_fatigue(trained):
    t0 = time.perf_counter()
    ok, m_na, m_fw, neg, n, fb, TABLES[7] = criterion_7(trained)
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed <= 600
    report(7, "fatigued arm", ok,
           f"after 3000 cycles min h with no-acbf {m_na:.2e} ({neg}/{n} trials negative), "
           f"framework {m_fw:.2e} (>= 0; {fb} fallback ticks), {elapsed:.0f} s")
    assert ok


def criterion_8(cache):
    pid = run("fish_tight_turn", cache, "pid")
    fw = run("fish_tight_turn", cache, "framework")
    m_pid = [t.summary["min_h_tube"] for t in pid.trials]
    m_fw = [t.summary["min_h_tube"] for t in fw.trials]
    sat = max(abs(r["u"][0]) for t in pid.trials for r in t.records)
    ok = all(m < 0 for m in m_pid) and all(m >= 0 for m in m_fw) and all(t.ok for t in pid.trials + fw.trials)
    return ok, m_pid, m_fw, sat, summary_csv(pid.summary_rows()) + summary_csv(fw.summary_rows())


def test_criterion_8_tight_turn(trained):
    t0 = time.perf_counter()
    ok, m_pid, m_fw, sat, TABLES[8] = criterion_8(trained)
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed <= 300
    report(8, "tight turn", ok,
           f"PID min h {max(m_pid):.3g} at best (all {len(m_pid)} trials < 0, |bias| saturates at {sat:.2f}); "
           f"framework min h {min(m_fw):.3g} at worst (>= 0), {elapsed:.0f} s")
    assert ok


def criterion_9(cache):
    log = run("fish_moving_target", cache)
    scn = log.scenario
    ticks = [s for t in log.trials for s in t.tick_seconds]
    track = [t.summary["mean_track_dist"] for t in log.trials]
    thr = scn.metrics.track_threshold
    ref = scn.task.reference
    cfg_ok = (scn.planner.samples, scn.planner.horizon, scn.planner.workers) == (256, 20, 4)
    cfg_ok = cfg_ok and ref.max_speed == 0.32 and ref.ramp_time == 60.0 and scn.duration == 60.0
    ok = cfg_ok and float(np.mean(ticks)) <= scn.dt and max(track) <= thr and all(t.ok for t in log.trials)
    return ok, float(np.mean(ticks)), track, thr, summary_csv(log.summary_rows())


def test_criterion_9_moving_target(trained):
    t0 = time.perf_counter()
    ok, tick, track, thr, TABLES[9] = criterion_9(trained)
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed <= 300
    report(9, "moving target", ok,
           f"mean tick {tick * 1000:.1f} ms (<= 50 ms, n=256 H=20, 4 workers), mean tracking distance "
           f"{max(track):.4f} m at worst (<= {thr}), {elapsed:.0f} s")
    assert ok


# --------------------------------------------------------------- criterion 10


def test_criterion_10_determinism(trained):
    reruns = {
        1: lambda: table(criterion_1()[1]),
        2: lambda: table([_passivity_and_minimality()]),
        3: lambda: table(criterion_3()[1]),
        4: lambda: criterion_4(trained)[-1],
        5: lambda: criterion_5(trained)[-1],
        6: lambda: criterion_6(trained)[-1],
        7: lambda: criterion_7(trained)[-1],
        8: lambda: criterion_8(trained)[-1],
        9: lambda: criterion_9(trained)[-1],
    }
    same = {}
    for n, fn in reruns.items():
        first = TABLES[n] if n in TABLES else fn()
        same[n] = fn() == first
    ok = all(same.values())
    diff = [n for n, s in same.items() if not s]
    report(10, "determinism", ok,
           "all summary tables byte-identical on rerun" if ok else f"tables differ for criteria {diff}")
    assert ok
