"""Linear DDPM noise schedule.

beta ramps linearly from 1e-4 (t=1) to 1e-2 (t=T); alpha_bar is the
running product with alpha_bar_0 defined as 1, which forces the posterior
variance beta_tilde to vanish at t=1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA_START = 1e-4
BETA_END = 1e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are 0-indexed: beta[t-1] is the step-t coefficient."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    alpha_bar_prev: np.ndarray = field(repr=False, default=None)

    def at(self, t):
        """(beta, alpha, alpha_bar, beta_tilde) for integer step(s) t in 1..T."""
        i = np.asarray(t) - 1
        return self.beta[i], self.alpha[i], self.alpha_bar[i], self.beta_tilde[i]


def build_schedule(T: int) -> NoiseSchedule:
    if T < 2:
        raise ValueError("schedule needs T >= 2 (the ramp divides by T-1)")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = (BETA_START * (T - t) + BETA_END * (t - 1)) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         beta_tilde=beta_tilde, alpha_bar_prev=prev)
