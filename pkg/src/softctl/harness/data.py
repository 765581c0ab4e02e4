"""Excitation data collection and cached model fitting."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from softctl.config import to_dict
from softctl.core import RngStream, Trajectory
from softctl.harness.systems import CollectConfig, System, make_system
from softctl.model import (
    Architecture,
    Checkpoint,
    Dataset,
    ErrorBound,
    calibrate_error_bound,
    load_checkpoint,
    save_checkpoint,
    train,
    zero_params,
)

log = logging.getLogger(__name__)


def collect_dataset(system: System, cfg: CollectConfig, dt: float) -> Dataset:
    """Run ``cfg.trajectories`` excitation episodes of ``cfg.steps`` steps.

    The last ``round(trajectories * validation_fraction)`` episodes run on a
    noise-free copy of the plant and are labelled ``validation``.
    """
    root = RngStream(cfg.seed)
    n_val = int(round(cfg.trajectories * cfg.validation_fraction))
    if cfg.trajectories >= 2 and n_val == 0 and cfg.validation_fraction > 0:
        n_val = 1
    noisy = system.with_params(cfg.params or {})
    quiet = noisy.quiet()
    trajs, splits = [], []
    for i in range(cfg.trajectories):
        validation = i >= cfg.trajectories - n_val
        sys_i = quiet if validation else noisy
        rng = root.child(i)
        plant = sys_i.random_initial(rng.child(0), cfg)
        controls = sys_i.excitation(rng.child(1), cfg.steps, dt, cfg)
        noise = rng.child(2)
        states = [sys_i.observe(plant)]
        for u in controls:
            plant, _ = sys_i.actuate(plant, u, dt, noise)
            states.append(sys_i.observe(plant))
        trajs.append(Trajectory(np.array(states), controls, dt))
        splits.append("validation" if validation else "train")
    return Dataset(trajs, splits)


def fit_model(dataset: Dataset, arch: Architecture, train_cfg, factor: float = 1.25) -> Checkpoint:
    result = train(dataset, arch, train_cfg)
    val = dataset.split("validation") or dataset.split("train")
    bound = calibrate_error_bound(result.params, val, dataset.dt, factor)
    meta = {"final_loss": result.losses[-1] if result.losses else None, "epochs": len(result.losses)}
    return Checkpoint(result.params, dataset.dt, bound, meta)


def model_key(scenario) -> dict:
    """Everything the trained model depends on (fatigue and noise seeds excluded)."""
    m = scenario.model
    return {
        "plant": scenario.plant.kind,
        "params": scenario.plant.params or {},
        "dt": scenario.dt,
        "hidden": list(m.hidden),
        "activation": m.activation,
        "bound_factor": m.bound_factor,
        "collect": to_dict(m.collect),
        "train": to_dict(m.train),
    }


def prepare_model(scenario, cache_dir: str | Path | None = None, checkpoint: str | Path | None = None) -> Checkpoint:
    """Load, or collect + train + calibrate, the scenario's model."""
    m = scenario.model
    system = make_system(scenario.plant.kind, scenario.plant.params)
    if m.kind == "zero":
        params = zero_params(Architecture(m.hidden, m.activation), system.n_state, system.n_control)
        return Checkpoint(params, scenario.dt, ErrorBound(0.0, 0.0, m.bound_factor, 0), {"kind": "zero"})
    path = checkpoint or m.checkpoint
    if path is not None:
        return load_checkpoint(path, system.n_state, system.n_control)
    key = model_key(scenario)
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    cached = None
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{scenario.plant.kind}-{digest}.json"
        if cached.exists():
            return load_checkpoint(cached, system.n_state, system.n_control)
    log.info("training %s model (%s)", scenario.plant.kind, digest)
    dataset = collect_dataset(system, m.collect, scenario.dt)
    ckpt = fit_model(dataset, Architecture(m.hidden, m.activation), m.train, m.bound_factor)
    ckpt.meta["key"] = digest
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(".tmp")
        save_checkpoint(tmp, ckpt)
        tmp.replace(cached)
        # reload so a fresh and a cached run see bit-identical parameters
        return load_checkpoint(cached, system.n_state, system.n_control)
    return ckpt
