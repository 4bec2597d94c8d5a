"""Linear-beta noise schedule and the coefficients derived from it.

Timesteps are 1-based throughout the package: ``t`` runs over ``1..T`` and
array entry ``t - 1`` holds the value for step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients of a DDPM forward process.

    Built by :func:`build_schedule` (or :meth:`from_betas`); all arrays are
    read-only float64 of length ``T``.
    """

    beta: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_bar_prev: np.ndarray = field(init=False, repr=False)
    sqrt_alpha_bar: np.ndarray = field(init=False, repr=False)
    sqrt_one_minus_alpha_bar: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef_x0: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef_xt: np.ndarray = field(init=False, repr=False)
    posterior_variance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if not alpha_bar[-1] > 0 or np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("cumulative alpha underflows; use fewer steps or smaller betas")
        # alpha_bar_0 == 1 so that the t=1 posterior is defined
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        values = dict(
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            alpha_bar_prev=alpha_bar_prev,
            sqrt_alpha_bar=np.sqrt(alpha_bar),
            sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
            posterior_mean_coef_x0=np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar),
            posterior_mean_coef_xt=np.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
            posterior_variance=beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
        )
        # t = 1 posterior is exactly x0 (abar_0 == 1); avoid rounding in beta / (1 - (1 - beta))
        values["posterior_mean_coef_x0"][0] = 1.0
        values["posterior_mean_coef_xt"][0] = 0.0
        values["posterior_variance"][0] = 0.0
        for name, arr in values.items():
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        return cls(np.asarray(betas, dtype=np.float64))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t) -> None:
        ts = np.asarray(t)
        if ts.size and (ts.min() < 1 or ts.max() > self.T):
            raise IndexError(f"timestep out of range 1..{self.T}: {t!r}")

    def at(self, name: str, t):
        """Look up coefficient array ``name`` at (1-based) timestep(s) ``t``."""
        self.check_t(t)
        return getattr(self, name)[np.asarray(t) - 1]


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start!r}, {beta_end!r}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def posterior_coefficients(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Return ``(coef_x0, coef_xt, variance)`` of q(x_{t-1} | x_t, x_0)."""
    if not (1 <= t <= s.T):
        raise IndexError(f"timestep out of range 1..{s.T}: {t!r}")
    i = t - 1
    return (
        float(s.posterior_mean_coef_x0[i]),
        float(s.posterior_mean_coef_xt[i]),
        float(s.posterior_variance[i]),
    )
