"""Forward noising, reverse steps and inpainted window generation.

All arithmetic here is float64 numpy; the noise network is queried in the
autodiff module's current float mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, ddim_subsequence


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 1.2
    use_cfg: bool = True

    def __post_init__(self):
        if not np.isfinite(self.omega):
            raise ValueError("guidance weight must be finite")


@dataclass(frozen=True)
class GenerationRequest:
    first_state: np.ndarray
    condition: np.ndarray
    stride: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def _check_step(k, sched):
    if not 1 <= k <= sched.K:
        raise ValueError(f"diffusion step {k} outside [1, {sched.K}]")


def forward_noise(tau0, k, eps, sched: NoiseSchedule):
    """Sample of q(tau^k | tau^0) given the Gaussian draw ``eps``.

    ``k`` may be an int or a per-sample integer array matching the leading
    axis of ``tau0``.
    """
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0.shape:
        raise ValueError(f"noise shape {eps.shape} != window shape {tau0.shape}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise ValueError(f"diffusion step outside [1, {sched.K}]")
    ab = sched.alpha_bar[k]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (tau0.ndim - 1))
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_uncond, eps_cond, omega):
    eps_uncond = np.asarray(eps_uncond)
    eps_cond = np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + omega * (eps_cond - eps_uncond)


def predict_clean(tau_k, eps_bar, k, sched: NoiseSchedule):
    ab = sched.alpha_bar[k]
    return (tau_k - np.sqrt(1.0 - ab) * eps_bar) / np.sqrt(ab)


def ddpm_reverse_step(tau_k, eps_bar, k, sched: NoiseSchedule, z):
    """Ancestral step k -> k-1 with posterior standard deviation on ``z``."""
    _check_step(k, sched)
    tau_k = np.asarray(tau_k, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != tau_k.shape:
        raise ValueError(f"z shape {z.shape} != tau shape {tau_k.shape}")
    ab, ab_prev = sched.alpha_bar[k], sched.alpha_bar[k - 1]
    tau_bar = predict_clean(tau_k, eps_bar, k, sched)
    c_clean = np.sqrt(ab_prev) * sched.beta[k] / (1.0 - ab)
    c_cur = np.sqrt(sched.alpha[k]) * (1.0 - ab_prev) / (1.0 - ab)
    return c_clean * tau_bar + c_cur * tau_k + np.sqrt(sched.posterior_var[k]) * z


def ddim_step(tau_k, eps_bar, k, k_prev, sched: NoiseSchedule):
    """Deterministic (eta = 0) jump from step k to k_prev < k."""
    if not 0 <= k_prev < k <= sched.K:
        raise ValueError(f"need 0 <= k_prev < k <= {sched.K}, got k={k}, k_prev={k_prev}")
    tau_k = np.asarray(tau_k, dtype=np.float64)
    tau_bar = predict_clean(tau_k, eps_bar, k, sched)
    ab_prev = sched.alpha_bar[k_prev]
    return np.sqrt(ab_prev) * tau_bar + np.sqrt(1.0 - ab_prev) * eps_bar


def _guided_noise(params, tau, k, conds, guidance: GuidanceConfig):
    from .denoiser import predict_noise_array

    b = tau.shape[0]
    steps = np.full(b, k)
    if not guidance.use_cfg:
        return predict_noise_array(params, tau, steps, conds, np.zeros(b, dtype=bool))
    both = predict_noise_array(
        params,
        np.concatenate([tau, tau]),
        np.concatenate([steps, steps]),
        np.concatenate([conds, conds]),
        np.concatenate([np.zeros(b, dtype=bool), np.ones(b, dtype=bool)]),
    )
    return cfg_combine(both[b:], both[:b], guidance.omega)


def generate_batch(params, first_states, conds, sched: NoiseSchedule, guidance: GuidanceConfig,
                   stride: int, rng: np.random.Generator):
    """Generate one window per row of ``first_states`` by inpainted reverse diffusion.

    Uses strided DDIM when ``stride > 1`` and ancestral DDPM when ``stride == 1``.
    Returns a float64 array [B, T_e, d_s + d_a] in normalized units.
    """
    cfg = params.config
    first_states = np.asarray(first_states, dtype=np.float64)
    conds = np.asarray(conds, dtype=np.float64)
    b = first_states.shape[0]
    d_s = cfg.state_dim
    if first_states.shape != (b, d_s):
        raise ValueError(f"first states must have shape [B, {d_s}], got {first_states.shape}")
    if conds.shape != (b, cfg.cond_dim):
        raise ValueError(f"conditions must have shape [B, {cfg.cond_dim}], got {conds.shape}")
    tau = rng.standard_normal((b, cfg.seq_len, cfg.channel_dim))
    steps = ddim_subsequence(sched.K, stride)
    for k, k_prev in zip(steps[:-1], steps[1:]):
        tau[:, 0, :d_s] = first_states
        eps_bar = _guided_noise(params, tau, k, conds, guidance)
        if stride == 1:
            z = rng.standard_normal(tau.shape) if k > 1 else np.zeros_like(tau)
            tau = ddpm_reverse_step(tau, eps_bar, k, sched, z)
        else:
            tau = ddim_step(tau, eps_bar, k, k_prev, sched)
    tau[:, 0, :d_s] = first_states
    return tau


def generate(params, req: GenerationRequest, sched: NoiseSchedule, guidance: GuidanceConfig):
    """Single-window generation; returns [T_e, d_s + d_a]."""
    first = np.asarray(req.first_state, dtype=np.float64)
    if first.shape != (params.config.state_dim,):
        raise ValueError(f"first state has shape {first.shape}, expected ({params.config.state_dim},)")
    rng = np.random.default_rng(req.seed)
    out = generate_batch(params, first[None], np.asarray(req.condition, dtype=np.float64)[None],
                         sched, guidance, req.stride, rng)
    return out[0]
