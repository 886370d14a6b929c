"""Noise schedule tables for the diffusion chain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables indexed by diffusion step.

    ``beta``, ``alpha`` and ``posterior_var`` have length ``K + 1`` with a
    dummy entry at index 0 so that ``beta[k]`` is the k-th step.
    ``alpha_bar[0] == 1``.
    """

    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def check(self) -> None:
        k = np.arange(1, self.K + 1)
        assert np.all(self.alpha[k] + self.beta[k] == 1.0)
        assert np.allclose(self.alpha_bar[k], np.cumprod(self.alpha[k]), rtol=1e-12, atol=0)
        assert np.all(np.diff(self.alpha_bar) < 0) and self.alpha_bar[-1] > 0
        assert self.posterior_var[1] == 0.0
        assert np.all((self.posterior_var[k] >= 0) & (self.posterior_var[k] < self.beta[k]))


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("need a 1-d, nonempty beta sequence")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie in (0, 1)")
    K = betas.size
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha[0] == 1 so alpha_bar[0] == 1
    post = np.zeros(K + 1)
    post[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(K, beta, alpha, alpha_bar, post)


def linear_schedule(K: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    return schedule_from_betas(np.linspace(beta_min, beta_max, K))


def ddim_subsequence(K: int, stride: int) -> list[int]:
    """Descending step indices K, K - stride, ..., ending with 0."""
    if not 1 <= stride <= K:
        raise ValueError(f"stride must be in [1, {K}], got {stride}")
    steps = list(range(K, 0, -stride))
    steps.append(0)
    return steps
