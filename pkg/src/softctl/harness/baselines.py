"""Reference controllers the framework is compared against."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softctl.plants import Stimulus


@dataclass(frozen=True)
class PidGains:
    kp: float = 1.0
    ki: float = 0.0
    kd: float = 0.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    previous_error: float | None = None


def pid_step(
    error: float, gains: PidGains, state: PidState, limit: float, dt: float
) -> tuple[float, PidState]:
    """Textbook PID with a hard output clamp.

    There is deliberately no anti-windup: the integrator keeps accumulating
    the raw error while the output sits on the limit.
    """
    integral = state.integral + error * dt
    deriv = 0.0 if state.previous_error is None else (error - state.previous_error) / dt
    raw = gains.kp * error + gains.ki * integral + gains.kd * deriv
    return float(np.clip(raw, -limit, limit)), PidState(integral, error)


def continuous_stimulation_step(heading_error: float, threshold: float) -> Stimulus:
    """Stimulate on every tick the heading error exceeds ``threshold``.

    Positive error (target to the left) gives a left stimulus.
    """
    if heading_error > threshold:
        return Stimulus.LEFT
    if heading_error < -threshold:
        return Stimulus.RIGHT
    return Stimulus.NONE
