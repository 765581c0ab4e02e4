"""Command-line entry point: ``softctl {collect,train,calibrate,run,compare}``.

Exit codes: 0 on success, 2 for configuration or I/O problems (the message
names the offending key or path), 3 for numeric failures such as a diverged
training run or an aborted trial.

The output directory defaults to ``$SOFTCTL_OUT`` when set, otherwise
``runs/<scenario name>``.  Trained models are cached under ``--cache-dir``
(default ``$SOFTCTL_CACHE`` or ``~/.cache/softctl``).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from softctl.config import ConfigError
from softctl.harness.data import collect_dataset, fit_model
from softctl.harness.runner import RunLog, run_scenario, summary_csv, write_outputs, write_snapshot
from softctl.harness.scenario import CONTROLLERS, Scenario, canonical_controller, load_scenario, resolve_scenario_path
from softctl.harness.systems import make_system
from softctl.model import (
    Architecture,
    TrainingDivergedError,
    calibrate_error_bound,
    load_checkpoint,
    load_dataset,
    one_step_residuals,
    save_checkpoint,
    save_dataset,
)

log = logging.getLogger("softctl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------- helpers


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _controller(text: str) -> str:
    try:
        return canonical_controller(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _pair(text: str) -> tuple[str, str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two variants separated by a comma")
    return _controller(parts[0]), _controller(parts[1])


def _load(args) -> Scenario:
    try:
        path = resolve_scenario_path(args.scenario)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    scn = load_scenario(path)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    if getattr(args, "controller", None) is not None:
        changes["controller"] = args.controller
    if changes:
        scn = replace(scn, **changes)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is not None:
        if not Path(ckpt).exists():
            raise CliError(f"checkpoint {ckpt} not found")
        scn = replace(scn, model=replace(scn.model, checkpoint=str(Path(ckpt).resolve())))
    return scn


def _out_dir(args, scn: Scenario) -> Path:
    if args.out is not None:
        return Path(args.out)
    env = os.environ.get("SOFTCTL_OUT")
    return Path(env) if env else Path("runs") / scn.name


def _cache_dir(args) -> Path:
    if args.cache_dir is not None:
        return Path(args.cache_dir)
    env = os.environ.get("SOFTCTL_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "softctl"


def _check_trials(run: RunLog) -> None:
    bad = [t for t in run.trials if not t.ok]
    if bad:
        for t in bad:
            log.error("trial %d (seed %d): %s", t.trial, t.seed, t.status)
        raise CliError(f"{len(bad)} of {len(run.trials)} trials failed", EXIT_NUMERIC)


def _print_summary(run: RunLog) -> None:
    for t in run.trials:
        s = t.summary
        keys = [k for k in s if k.startswith(("min_", "safety_ratio", "interventions", "stimulations"))]
        body = " ".join(f"{k}={s[k]:.4g}" for k in keys if isinstance(s[k], (int, float)))
        print(f"trial {t.trial} seed {t.seed} {t.status} {body} mean_tick_ms={1e3 * t.mean_tick:.2f}")


# ---------------------------------------------------------------- commands


def cmd_collect(args) -> int:
    scn = _load(args)
    cfg = scn.model.collect
    if args.trajectories is not None:
        cfg = replace(cfg, trajectories=args.trajectories)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    system = make_system(scn.plant.kind, scn.plant.params, scn.plant.control_lo, scn.plant.control_hi)
    dataset = collect_dataset(system, cfg, scn.dt)
    out = Path(args.out) if args.out else _out_dir(args, scn) / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, dataset, {"scenario": scn.name, "plant": scn.plant.kind, "seed": cfg.seed})
    if not dataset.trajectories:
        log.warning("no trajectories requested; wrote an empty dataset to %s", out)
        print(f"wrote 0 trajectories to {out}")
        return EXIT_OK
    states = np.concatenate([t.states for t in dataset.trajectories])
    print(f"wrote {len(dataset.trajectories)} trajectories x {cfg.steps} steps to {out}")
    print("coverage lo " + " ".join(f"{v:.4g}" for v in states.min(axis=0)))
    print("coverage hi " + " ".join(f"{v:.4g}" for v in states.max(axis=0)))
    return EXIT_OK


def cmd_train(args) -> int:
    scn = _load(args)
    if not Path(args.dataset).exists():
        raise CliError(f"dataset {args.dataset} not found")
    dataset, _ = load_dataset(args.dataset)
    if not dataset.trajectories:
        raise CliError(f"dataset {args.dataset} holds no trajectories")
    train_cfg = scn.model.train if args.seed is None else replace(scn.model.train, seed=args.seed)
    arch = Architecture(scn.model.hidden, scn.model.activation)
    ckpt = fit_model(dataset, arch, train_cfg, scn.model.bound_factor)
    val = dataset.split("validation") or dataset.split("train")
    res = one_step_residuals(ckpt.params, val, dataset.dt)
    out = Path(args.out) if args.out else _out_dir(args, scn) / "model.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, ckpt)
    print(f"final train loss {ckpt.meta['final_loss']:.6g}")
    print(f"validation residual max {float(res.max()):.6g} mean {float(res.mean()):.6g}")
    print(f"eps_bar {ckpt.bound.value:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    for p in (args.checkpoint, args.dataset):
        if not Path(p).exists():
            raise CliError(f"{p} not found")
    ckpt = load_checkpoint(args.checkpoint)
    dataset, _ = load_dataset(args.dataset)
    val = dataset.split("validation") or dataset.split("train")
    if not val:
        raise CliError(f"dataset {args.dataset} holds no trajectories")
    ckpt.bound = calibrate_error_bound(ckpt.params, val, dataset.dt, args.factor)
    out = Path(args.out) if args.out else Path(args.checkpoint)
    save_checkpoint(out, ckpt)
    print(f"eps_bar {ckpt.bound.value:.6g} (max residual {ckpt.bound.raw:.6g} x {args.factor})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.compare is not None:
        return cmd_compare(args)
    scn = _load(args)
    out = _out_dir(args, scn)
    run = run_scenario(scn, _cache_dir(args))
    write_outputs(run, out)
    _print_summary(run)
    print(f"eps_bar {run.eps_bar:.6g}; outputs in {out}")
    _check_trials(run)
    return EXIT_OK


def paired_deltas(a: RunLog, b: RunLog) -> list[dict]:
    """Per-seed ``b - a`` for every numeric summary column both runs share."""
    rows = []
    by_seed = {t.seed: t for t in b.trials}
    for ta in a.trials:
        tb = by_seed.get(ta.seed)
        if tb is None:
            continue
        row: dict = {"trial": ta.trial, "seed": ta.seed}
        for k, va in ta.summary.items():
            vb = tb.summary.get(k)
            if isinstance(va, (int, float)) and isinstance(vb, (int, float)):
                row[f"{k}_a"] = va
                row[f"{k}_b"] = vb
                row[f"{k}_delta"] = vb - va if not (math.isnan(va) or math.isnan(vb)) else math.nan
        rows.append(row)
    return rows


def cmd_compare(args) -> int:
    scn = _load(args)
    va, vb = args.compare or ("framework", "no-acbf")
    out = _out_dir(args, scn)
    cache = _cache_dir(args)
    runs = []
    for v in (va, vb):
        run = run_scenario(replace(scn, controller=v), cache)
        write_outputs(run, out / v)
        runs.append(run)
    rows = paired_deltas(*runs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text(summary_csv(rows), encoding="utf-8")
    write_snapshot(scn, out / "resolved_config.yaml")
    for r in rows:
        deltas = " ".join(f"{k[:-6]}={r[k]:+.4g}" for k in r if k.endswith("_delta"))
        print(f"seed {r['seed']} {vb}-{va}: {deltas}")
    print(f"outputs in {out}")
    for run in runs:
        _check_trials(run)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
        sp.add_argument("--seed", type=_seed, default=None, help="override the scenario seed")
        sp.add_argument("--out", default=None, help=out_help)

    sp = sub.add_parser("collect", help="record excitation trajectories")
    common(sp, "dataset file (default <out dir>/dataset.jsonl)")
    sp.add_argument("--trajectories", type=int, default=None)
    sp.add_argument("--steps", type=_positive, default=None)
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="fit the dynamics model and calibrate its error bound")
    common(sp, "checkpoint file (default <out dir>/model.json)")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("calibrate", help="recompute the error bound of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--factor", type=float, default=1.25)
    sp.add_argument("--out", default=None, help="new checkpoint file (default: overwrite)")
    sp.set_defaults(func=cmd_calibrate)

    for name, func in (("run", cmd_run), ("compare", cmd_compare)):
        sp = sub.add_parser(name, help="run a scenario" if name == "run" else "run two controllers on the same seeds")
        common(sp)
        sp.add_argument("--trials", type=_positive, default=None)
        sp.add_argument("--controller", type=_controller, default=None, help="|".join(CONTROLLERS))
        sp.add_argument("--checkpoint", default=None, help="use this model instead of training")
        sp.add_argument("--compare", type=_pair, default=None, metavar="A,B")
        sp.add_argument("--cache-dir", default=None)
        sp.set_defaults(func=func)
    for name in ("collect", "train"):
        sub.choices[name].set_defaults(cache_dir=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
