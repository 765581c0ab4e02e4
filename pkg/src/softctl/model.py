"""Learned derivative field ``dx/dt = f(x, u)`` with a calibrated error bound.

The network is a plain fully connected MLP evaluated in numpy. Training
backpropagates through the unrolled RK4 rollout (discretize-then-optimize),
so the gradients are exact for the loss actually computed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from softctl.core import Array, IntegrationError, RngStream, Trajectory, rk4_step

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "softctl-model/1"
SAFETY_FACTOR = 1.25


class ModelShapeError(ValueError):
    pass


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


@dataclass(frozen=True)
class Architecture:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class ModelParams:
    """Weights ``W[l]`` are stored ``(fan_in, fan_out)``.

    Inputs are standardized with ``in_shift``/``in_scale`` and the raw network
    output is multiplied by ``out_scale``; both are fixed at training start.
    """

    arch: Architecture
    n_state: int
    n_control: int
    weights: list[Array]
    biases: list[Array]
    in_shift: Array
    in_scale: Array
    out_scale: Array

    def __post_init__(self):
        widths = [self.n_state + self.n_control, *self.arch.hidden, self.n_state]
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ModelShapeError("layer count does not match architecture")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise ModelShapeError(f"layer {l} has shape {W.shape}, expected {(widths[l], widths[l + 1])}")
        for a in (*self.weights, *self.biases, self.in_shift, self.in_scale, self.out_scale):
            if not np.all(np.isfinite(a)):
                raise ValueError("model parameters must be finite")

    @property
    def arrays(self) -> list[Array]:
        return [*self.weights, *self.biases]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            self.n_state,
            self.n_control,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.in_shift.copy(),
            self.in_scale.copy(),
            self.out_scale.copy(),
        )

    def field(self):
        """Return ``fn(x, u)`` suitable for :func:`softctl.core.rk4_step`."""
        return lambda x, u: predict_derivative(self, x, u)


def init_params(
    arch: Architecture,
    n_state: int,
    n_control: int,
    rng: RngStream,
    in_shift: Array | None = None,
    in_scale: Array | None = None,
    out_scale: Array | None = None,
) -> ModelParams:
    widths = [n_state + n_control, *arch.hidden, n_state]
    weights, biases = [], []
    for l in range(len(widths) - 1):
        gain = 0.1 if l == len(widths) - 2 else 1.0
        weights.append(gain * rng.normal((widths[l], widths[l + 1])) / math.sqrt(widths[l]))
        biases.append(np.zeros(widths[l + 1]))
    d = n_state + n_control
    return ModelParams(
        arch,
        n_state,
        n_control,
        weights,
        biases,
        np.zeros(d) if in_shift is None else np.asarray(in_shift, float),
        np.ones(d) if in_scale is None else np.asarray(in_scale, float),
        np.ones(n_state) if out_scale is None else np.asarray(out_scale, float),
    )


def zero_params(arch: Architecture, n_state: int, n_control: int) -> ModelParams:
    widths = [n_state + n_control, *arch.hidden, n_state]
    return ModelParams(
        arch,
        n_state,
        n_control,
        [np.zeros((widths[l], widths[l + 1])) for l in range(len(widths) - 1)],
        [np.zeros(widths[l + 1]) for l in range(len(widths) - 1)],
        np.zeros(n_state + n_control),
        np.ones(n_state + n_control),
        np.ones(n_state),
    )


# ----------------------------------------------------------------- forward pass


def _affine(h: Array, W: Array, b: Array) -> Array:
    # BLAS routes single rows through gemv, which rounds differently from the
    # batched gemm path; pad so a lone candidate reproduces its batched value.
    if h.shape[0] == 1:
        return (np.concatenate([h, h]) @ W)[:1] + b
    return h @ W + b


def _forward(params: ModelParams, z: Array) -> tuple[Array, list[Array]]:
    h = (z - params.in_shift) / params.in_scale
    hs = [h]
    last = len(params.weights) - 1
    for l in range(last):
        h = _affine(h, params.weights[l], params.biases[l])
        if params.arch.activation == "tanh":
            h = np.tanh(h)
        hs.append(h)
    y = _affine(h, params.weights[last], params.biases[last])
    return y * params.out_scale, hs


def _backward(params: ModelParams, hs: list[Array], g_out: Array, grads: list[Array]) -> Array:
    """Accumulate parameter gradients into ``grads``; return d/d(input)."""
    n_layers = len(params.weights)
    g = g_out * params.out_scale
    for l in range(n_layers - 1, -1, -1):
        grads[l] += hs[l].T @ g
        grads[n_layers + l] += g.sum(axis=0)
        g = g @ params.weights[l].T
        if l > 0 and params.arch.activation == "tanh":
            g = g * (1.0 - hs[l] ** 2)
    return g / params.in_scale


def predict_derivative(params: ModelParams, x, u) -> Array:
    """Forward pass; ``x``/``u`` may carry matching leading batch axes."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape[-1] != params.n_state or u.shape[-1] != params.n_control:
        raise ModelShapeError(
            f"expected state dim {params.n_state} and control dim {params.n_control}, "
            f"got {x.shape[-1]} and {u.shape[-1]}"
        )
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, (*lead, params.n_state)).reshape(-1, params.n_state)
    u = np.broadcast_to(u, (*lead, params.n_control)).reshape(-1, params.n_control)
    f, _ = _forward(params, np.concatenate([x, u], axis=1))
    return f.reshape(*lead, params.n_state)


# --------------------------------------------------------------------- rollout


def rollout_batch(params: ModelParams, x0: Array, controls: Array, dt: float) -> tuple[Array, Array]:
    """Roll ``N`` control sequences ``(N, H, m)`` from a shared or per-row ``x0``.

    Returns predicted states ``(N, H+1, n)`` and the first-stage derivatives
    ``f(x_k, u_k)`` ``(N, H, n)`` evaluated along the way.
    """
    controls = np.asarray(controls, dtype=np.float64)
    N, H, _ = controls.shape
    states = np.empty((N, H + 1, params.n_state))
    derivs = np.empty((N, H, params.n_state))
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (N, params.n_state)).copy()
    states[:, 0] = x
    for k in range(H):
        u = controls[:, k]
        k1 = _stage(params, x, u, 1)
        k2 = _stage(params, x + 0.5 * dt * k1, u, 2)
        k3 = _stage(params, x + 0.5 * dt * k2, u, 3)
        k4 = _stage(params, x + dt * k3, u, 4)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        derivs[:, k] = k1
        states[:, k + 1] = x
    return states, derivs


def _stage(params: ModelParams, x: Array, u: Array, stage: int) -> Array:
    f, _ = _forward(params, np.concatenate([x, u], axis=1))
    if not np.all(np.isfinite(f)):
        raise IntegrationError(stage)
    return f


def rollout(params: ModelParams, x0, controls, dt: float, t0: float = 0.0) -> Trajectory:
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim != 2 or controls.shape[0] < 1:
        raise ValueError("controls must be (H, m) with H >= 1")
    states, _ = rollout_batch(params, np.asarray(x0, float)[None], controls[None], dt)
    return Trajectory(states[0], controls, dt, t0)


# -------------------------------------------------------------------- training


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    splits: list[str]

    def __post_init__(self):
        if len(self.trajectories) != len(self.splits):
            raise ValueError("one split label per trajectory")
        if any(s not in ("train", "validation") for s in self.splits):
            raise ValueError("split labels must be 'train' or 'validation'")
        dims = {(t.n_state, t.n_control) for t in self.trajectories}
        if len(dims) > 1:
            raise ValueError(f"inconsistent trajectory dimensions {sorted(dims)}")

    def split(self, name: str) -> list[Trajectory]:
        return [t for t, s in zip(self.trajectories, self.splits) if s == name]

    @property
    def dt(self) -> float:
        dts = {t.dt for t in self.trajectories}
        if len(dts) != 1:
            raise ValueError("dataset mixes time steps")
        return dts.pop()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 3e-3
    final_lr_fraction: float = 0.05
    batch_size: int = 128
    horizon: int = 10
    stride: int = 1
    seed: int = 0
    ignore_inputs: tuple[int, ...] = ()


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    state_scale: Array


@dataclass
class Windows:
    x0: Array        # (W, n)
    controls: Array  # (W, T, m)
    targets: Array   # (W, T, n)


def make_windows(trajs: Sequence[Trajectory], horizon: int, stride: int = 1) -> Windows:
    x0, us, ys = [], [], []
    for tr in trajs:
        T = min(horizon, len(tr))
        for s in range(0, len(tr) - T + 1, stride):
            x0.append(tr.states[s])
            us.append(tr.controls[s : s + T])
            ys.append(tr.states[s + 1 : s + T + 1])
    if not x0:
        raise ValueError("no training windows")
    lengths = {u.shape[0] for u in us}
    if len(lengths) > 1:
        T = min(lengths)
        us = [u[:T] for u in us]
        ys = [y[:T] for y in ys]
    return Windows(np.array(x0), np.array(us), np.array(ys))


def loss_and_grad(
    params: ModelParams, win: Windows, dt: float, state_scale: Array, need_grad: bool = True
) -> tuple[float, list[Array] | None]:
    """Mean squared scaled multi-step error and its exact gradient."""
    B, T, _ = win.controls.shape
    n = params.n_state
    x = win.x0.copy()
    tape = []
    err_sum = 0.0
    w = 1.0 / (state_scale**2 * B * T * n)
    g_states = []
    for k in range(T):
        u = win.controls[:, k]
        k1, c1 = _forward(params, np.concatenate([x, u], 1))
        z2 = x + 0.5 * dt * k1
        k2, c2 = _forward(params, np.concatenate([z2, u], 1))
        z3 = x + 0.5 * dt * k2
        k3, c3 = _forward(params, np.concatenate([z3, u], 1))
        z4 = x + dt * k3
        k4, c4 = _forward(params, np.concatenate([z4, u], 1))
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tape.append((c1, c2, c3, c4))
        r = x - win.targets[:, k]
        err_sum += float(np.sum(r * r * w))
        g_states.append(2.0 * r * w)
    if not math.isfinite(err_sum):
        return err_sum, None
    if not need_grad:
        return err_sum, None
    grads = [np.zeros_like(a) for a in params.arrays]
    gx = np.zeros_like(x)
    for k in range(T - 1, -1, -1):
        gx = gx + g_states[k]
        c1, c2, c3, c4 = tape[k]
        gk4 = (dt / 6.0) * gx
        gk3 = (dt / 3.0) * gx
        gk2 = (dt / 3.0) * gx
        gk1 = (dt / 6.0) * gx
        gz = _backward(params, c4, gk4, grads)[:, :n]
        gx = gx + gz
        gk3 = gk3 + dt * gz
        gz = _backward(params, c3, gk3, grads)[:, :n]
        gx = gx + gz
        gk2 = gk2 + 0.5 * dt * gz
        gz = _backward(params, c2, gk2, grads)[:, :n]
        gx = gx + gz
        gk1 = gk1 + 0.5 * dt * gz
        gx = gx + _backward(params, c1, gk1, grads)[:, :n]
    return err_sum, grads


def _normalizers(trajs: Sequence[Trajectory]) -> tuple[Array, Array, Array, Array]:
    xs = np.concatenate([t.states[:-1] for t in trajs])
    us = np.concatenate([t.controls for t in trajs])
    dx = np.concatenate([np.diff(t.states, axis=0) / t.dt for t in trajs])
    z = np.concatenate([xs, us], axis=1)
    shift = z.mean(axis=0)
    scale = z.std(axis=0)
    scale[scale < 1e-8] = 1.0
    out = dx.std(axis=0)
    out[out < 1e-8] = 1.0
    sscale = np.concatenate([t.states for t in trajs]).std(axis=0)
    sscale[sscale < 1e-8] = 1.0
    return shift, scale, out, sscale


def train(dataset: Dataset, arch: Architecture, hyper: TrainConfig) -> TrainResult:
    """Fit the derivative network to the train split by multi-step rollout error.

    Minibatch order is drawn from a stream seeded by ``hyper.seed``, so two
    runs with the same inputs give bit-identical parameters. The learning rate
    follows a cosine decay to ``final_lr_fraction`` of its initial value.
    """
    trajs = dataset.split("train")
    if not trajs:
        raise ValueError("train split is empty")
    dt = dataset.dt
    n, m = trajs[0].n_state, trajs[0].n_control
    shift, scale, out, sscale = _normalizers(trajs)
    rng = RngStream(hyper.seed)
    params = init_params(arch, n, m, rng.child(0), shift, scale, out)
    # inputs the dynamics must not depend on (e.g. absolute position of a
    # swimmer) get first-layer rows pinned at zero for the whole run
    mask = np.ones((n + m, 1))
    mask[list(hyper.ignore_inputs)] = 0.0
    params.weights[0] *= mask
    win = make_windows(trajs, hyper.horizon, hyper.stride)
    W = win.x0.shape[0]
    order_rng = rng.child(1)

    arrays = params.arrays
    m1 = [np.zeros_like(a) for a in arrays]
    m2 = [np.zeros_like(a) for a in arrays]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses: list[float] = []
    bs = min(hyper.batch_size, W)
    for epoch in range(hyper.epochs):
        frac = epoch / max(hyper.epochs - 1, 1)
        lr = hyper.learning_rate * (
            hyper.final_lr_fraction + (1 - hyper.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac))
        )
        perm = np.argsort(order_rng.normal(W), kind="stable")
        for start in range(0, W - bs + 1, bs):
            idx = perm[start : start + bs]
            sub = Windows(win.x0[idx], win.controls[idx], win.targets[idx])
            loss, grads = loss_and_grad(params, sub, dt, sscale)
            if grads is None or not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            step += 1
            grads[0] *= mask
            for a, g, v1, v2 in zip(arrays, grads, m1, m2):
                v1 *= b1
                v1 += (1 - b1) * g
                v2 *= b2
                v2 += (1 - b2) * g * g
                a -= lr * (v1 / (1 - b1**step)) / (np.sqrt(v2 / (1 - b2**step)) + eps)
        full, _ = loss_and_grad(params, win, dt, sscale, need_grad=False)
        if not math.isfinite(full):
            raise TrainingDivergedError(epoch)
        losses.append(full)
        log.debug("epoch %d loss %.6g", epoch, full)
    return TrainResult(params, losses, sscale)


# ----------------------------------------------------------------- calibration


@dataclass(frozen=True)
class ErrorBound:
    """Worst-case derivative error ``value`` (already inflated by ``factor``).

    ``state_lo``/``state_hi`` and ``control_lo``/``control_hi`` bound the
    region the residuals were measured on.
    """

    value: float
    raw: float
    factor: float
    samples: int
    state_lo: tuple[float, ...] = ()
    state_hi: tuple[float, ...] = ()
    control_lo: tuple[float, ...] = ()
    control_hi: tuple[float, ...] = ()

    def __post_init__(self):
        if self.value < 0 or self.raw < 0:
            raise ValueError("error bound must be non-negative")

    def covers(self, states: Array, controls: Array | None = None, slack: float = 0.0) -> bool:
        if not self.state_lo:
            return True
        lo = np.asarray(self.state_lo)
        hi = np.asarray(self.state_hi)
        pad = slack * (hi - lo)
        ok = bool(np.all(states >= lo - pad) and np.all(states <= hi + pad))
        if controls is not None and self.control_lo:
            clo, chi = np.asarray(self.control_lo), np.asarray(self.control_hi)
            ok = ok and bool(np.all(controls >= clo - 1e-12) and np.all(controls <= chi + 1e-12))
        return ok


def one_step_residuals(params: ModelParams, validation: Sequence[Trajectory], dt: float) -> Array:
    """``||rk4_model(x_k, u_k) - x_{k+1}|| / dt`` for every recorded step."""
    out = []
    fn = params.field()
    for tr in validation:
        pred = rk4_step(fn, tr.states[:-1], tr.controls, dt)
        out.append(np.linalg.norm(pred - tr.states[1:], axis=1) / dt)
    return np.concatenate(out) if out else np.zeros(0)


def calibrate_error_bound(
    params: ModelParams, validation: Sequence[Trajectory], dt: float, factor: float = SAFETY_FACTOR
) -> ErrorBound:
    if not validation:
        raise ValueError("validation set is empty")
    res = one_step_residuals(params, validation, dt)
    raw = float(res.max()) if res.size else 0.0
    xs = np.concatenate([t.states for t in validation])
    us = np.concatenate([t.controls for t in validation])
    return ErrorBound(
        value=factor * raw,
        raw=raw,
        factor=factor,
        samples=int(res.size),
        state_lo=tuple(float(v) for v in xs.min(0)),
        state_hi=tuple(float(v) for v in xs.max(0)),
        control_lo=tuple(float(v) for v in us.min(0)),
        control_hi=tuple(float(v) for v in us.max(0)),
    )


# ---------------------------------------------------------------- persistence


@dataclass
class Checkpoint:
    params: ModelParams
    dt: float
    bound: ErrorBound | None = None
    meta: dict = field(default_factory=dict)


def _tolist(a: Array):
    return np.asarray(a).tolist()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    p = ckpt.params
    doc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {"hidden": list(p.arch.hidden), "activation": p.arch.activation},
        "n_state": p.n_state,
        "n_control": p.n_control,
        "dt": ckpt.dt,
        "in_shift": _tolist(p.in_shift),
        "in_scale": _tolist(p.in_scale),
        "out_scale": _tolist(p.out_scale),
        "weights": [_tolist(w) for w in p.weights],
        "biases": [_tolist(b) for b in p.biases],
        "error_bound": None if ckpt.bound is None else asdict(ckpt.bound),
        "meta": ckpt.meta,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(
    path: str | Path, n_state: int | None = None, n_control: int | None = None
) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if n_state is not None and doc["n_state"] != n_state:
        raise ModelShapeError(f"checkpoint state dim {doc['n_state']} != expected {n_state}")
    if n_control is not None and doc["n_control"] != n_control:
        raise ModelShapeError(f"checkpoint control dim {doc['n_control']} != expected {n_control}")
    arch = Architecture(tuple(doc["architecture"]["hidden"]), doc["architecture"]["activation"])
    params = ModelParams(
        arch,
        doc["n_state"],
        doc["n_control"],
        [np.array(w, dtype=np.float64).reshape(len(w), -1) for w in doc["weights"]],
        [np.array(b, dtype=np.float64) for b in doc["biases"]],
        np.array(doc["in_shift"], dtype=np.float64),
        np.array(doc["in_scale"], dtype=np.float64),
        np.array(doc["out_scale"], dtype=np.float64),
    )
    eb = doc.get("error_bound")
    bound = None
    if eb is not None:
        bound = ErrorBound(**{k: tuple(v) if isinstance(v, list) else v for k, v in eb.items()})
    return Checkpoint(params, float(doc["dt"]), bound, doc.get("meta", {}))


def save_dataset(path: str | Path, dataset: Dataset, meta: dict | None = None) -> None:
    """Line-delimited JSON: a header line, then one record per recorded state."""
    n = dataset.trajectories[0].n_state if dataset.trajectories else 0
    m = dataset.trajectories[0].n_control if dataset.trajectories else 0
    dt = dataset.trajectories[0].dt if dataset.trajectories else None
    header = {
        "format": "softctl-dataset/1",
        "trajectories": len(dataset.trajectories),
        "n_state": n,
        "n_control": m,
        "dt": dt,
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, (tr, split) in enumerate(zip(dataset.trajectories, dataset.splits)):
            K = len(tr)
            for k in range(K + 1):
                rec = {
                    "traj": i,
                    "split": split,
                    "k": k,
                    "t": tr.t0 + k * tr.dt,
                    "x": tr.states[k].tolist(),
                    "u": tr.controls[k].tolist() if k < K else None,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[Dataset, dict]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "softctl-dataset/1":
            raise ValueError(f"{path}: not a softctl dataset")
        groups: dict[int, list[dict]] = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                groups.setdefault(rec["traj"], []).append(rec)
    trajs, splits = [], []
    for i in sorted(groups):
        recs = sorted(groups[i], key=lambda r: r["k"])
        states = np.array([r["x"] for r in recs], dtype=np.float64)
        controls = np.array([r["u"] for r in recs[:-1]], dtype=np.float64).reshape(len(recs) - 1, -1)
        trajs.append(Trajectory(states, controls, header["dt"], recs[0]["t"]))
        splits.append(recs[0]["split"])
    return Dataset(trajs, splits), header


def losses_non_increasing(losses: Iterable[float], window: int = 10, floor: float = 1e-12) -> bool:
    """True when every loss is <= the loss ``window`` epochs earlier.

    Differences below ``floor`` times the first loss count as round-off.
    """
    ls = list(losses)
    if not ls:
        return True
    tol = floor * abs(ls[0])
    return all(ls[i + window] <= ls[i] + tol for i in range(len(ls) - window))
