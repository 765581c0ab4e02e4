import numpy as np
import pytest

from softctl.core import RngStream, Trajectory, rk4_step
from softctl.model import Architecture, Dataset, zero_params

A_LIN = np.array([[0.0, 1.0], [-2.0, -0.5]])
B_LIN = np.array([[0.0], [1.0]])
LINEAR = Architecture((), "linear")


def linear_params(M):
    """A single affine layer computing ``M @ [x; u]``."""
    M = np.asarray(M, float)
    n = M.shape[0]
    p = zero_params(LINEAR, n, M.shape[1] - n)
    p.weights[0][:] = M.T
    return p


def linear_dataset(n_traj=12, steps=60, dt=0.05, seed=0, val=3):
    """Noise-free trajectories of x' = A x + B u under random piecewise inputs."""
    rng = RngStream(seed)
    fn = lambda x, u: A_LIN @ x + B_LIN @ u
    trajs, splits = [], []
    for i in range(n_traj):
        x = rng.normal(2)
        us = np.repeat(rng.normal((steps // 5, 1)), 5, axis=0)
        xs = [x]
        for u in us:
            x = rk4_step(fn, x, u, dt)
            xs.append(x)
        trajs.append(Trajectory(np.array(xs), us, dt))
        splits.append("validation" if i >= n_traj - val else "train")
    return Dataset(trajs, splits)


@pytest.fixture(scope="session")
def lin_data():
    return linear_dataset()


def random_barrier(rng, n):
    """A random obstacle, corridor or band over a random 2-D probe of an ``n``-state.

    Returns the spec and the keyword geometry the oracles expect.
    """
    from softctl import barriers as bar

    P = rng.normal((2, n))
    kind = ("obstacle", "corridor", "band")[int(rng.uniform() * 3)]
    if kind == "obstacle":
        g = {"center": tuple(rng.normal(2)), "radius": 0.2 + float(rng.uniform())}
        spec = bar.obstacle(g["center"], g["radius"], P)
    elif kind == "corridor":
        g = {"axis": int(rng.uniform() * 2), "offset": float(rng.normal()), "half_width": 0.5 + float(rng.uniform())}
        spec = bar.corridor(g["half_width"], P, g["axis"], g["offset"])
    else:
        path = np.cumsum(rng.normal((4, 2)), axis=0)
        g = {"path": path.tolist(), "half_width": 0.5 + float(rng.uniform())}
        spec = bar.band(path, g["half_width"], P)
    return spec, kind, P.tolist(), g


def random_batch(rng, n, H, nx=4, m=2):
    """A candidate batch with random (but consistently paired) contents."""
    from softctl.planner import CandidateBatch

    controls = rng.normal((n, H, m))
    states = rng.normal((n, H + 1, nx))
    derivs = rng.normal((n, H, nx))
    costs = np.round(rng.uniform(n) * 10, 1)
    w = np.full(n, 1.0 / n)
    opt = int(np.argmin(costs))
    return CandidateBatch(controls, states, derivs, costs, w, opt, 0.1)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
