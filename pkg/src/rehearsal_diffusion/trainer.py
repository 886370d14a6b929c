"""Sequential per-task diffusion training with periodic experience rehearsal."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import (GaussianNormalizer, RehearsalBuffer, WindowSet, build_rehearsal,
                       fit_normalizer, sample_batch, split_windows)
from .denoiser import DenoiserConfig, DenoiserParams, attach_lora, init_denoiser, predict_noise
from .sampler import forward_noise
from .schedule import NoiseSchedule, linear_schedule

log = logging.getLogger(__name__)

NO_REHEARSAL = math.inf


@dataclass(frozen=True)
class TrainConfig:
    steps_per_task: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    upsilon: float = 2          # rehearsal every upsilon steps; math.inf disables
    xi: float = 0.1
    K: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    omega: float = 1.2
    stride: int = 10
    seed: int = 0
    lora_rank: int = 0          # 0 = plain training
    checkpoints_per_task: int = 1

    def __post_init__(self):
        if self.steps_per_task < 1:
            raise ValueError("steps_per_task must be >= 1")
        if not (self.upsilon == NO_REHEARSAL or (self.upsilon >= 1 and float(self.upsilon).is_integer())):
            raise ValueError(f"upsilon must be a positive integer or inf, got {self.upsilon}")
        if not 0 < self.xi <= 1:
            raise ValueError(f"xi must be in (0, 1], got {self.xi}")

    @property
    def rehearsal(self) -> bool:
        return self.upsilon != NO_REHEARSAL

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.K, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class TrainLogEntry:
    step: int
    task: int
    loss: float
    was_rehearsal: bool
    rehearsal_task: int | None = None


def is_rehearsal_step(task_index: int, m: int, upsilon) -> bool:
    return task_index > 0 and upsilon != NO_REHEARSAL and m % int(upsilon) == 0


def diffusion_loss(params: DenoiserParams, batch, conds, sched: NoiseSchedule, rng, dropout_p=None):
    """Noise-prediction MSE on one batch; returns ``(loss, grads)`` for trainable weights."""
    cfg = params.config
    p = cfg.dropout_p if dropout_p is None else dropout_p
    b = batch.shape[0]
    k = rng.integers(1, sched.K + 1, size=b)
    eps = rng.standard_normal(batch.shape)
    tau_k = forward_noise(batch, k, eps, sched)
    dropped = rng.uniform(size=b) < p if p > 0 else np.zeros(b, dtype=bool)
    trainable = set(params.trainable)
    leaves = {n: (ad.parameter(w, n) if n in trainable else ad.Tensor(w)) for n, w in params.weights.items()}
    pred = predict_noise(params, tau_k, k, conds, dropped, leaves=leaves)
    # batch mean of per-sample squared norms ||eps - eps_theta||^2
    loss = ad.mul(ad.mean_square(pred, eps.astype(ad.get_dtype())), float(batch[0].size))
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite diffusion loss {value}; {np.sum(~np.isfinite(pred.data))} non-finite predictions, "
            f"{np.sum(~np.isfinite(batch))} non-finite inputs, k range [{k.min()}, {k.max()}]")
    grads = ad.backward(loss, {n: leaves[n] for n in params.trainable})
    return value, grads


def train_task(i: int, windows: WindowSet, buffers: list, cfg: TrainConfig, params: DenoiserParams,
               sched: NoiseSchedule, rng, opt_state: ad.AdamState | None = None, step_offset: int = 0,
               n_steps: int | None = None, m_offset: int = 0):
    """Train on task ``i`` with rehearsal from frozen buffers of tasks ``< i``.

    Runs ``n_steps`` steps (default: the whole task) starting at in-task step
    ``m_offset``.  Returns ``(params, opt_state, log_entries)``.
    """
    if i > 0 and cfg.rehearsal and len(buffers) < i:
        raise ValueError(f"task {i} needs rehearsal buffers for tasks 0..{i - 1}, got {len(buffers)}")
    opt_state = opt_state or ad.AdamState()
    mode = params.config.cond_mode
    n_steps = cfg.steps_per_task if n_steps is None else n_steps
    entries = []
    weights = params.weights
    for m in range(m_offset, m_offset + n_steps):
        j = None
        if is_rehearsal_step(i, m, cfg.upsilon):
            j = int(rng.integers(0, i))
            batch, conds = sample_batch(buffers[j], cfg.batch_size, rng, mode)
        else:
            batch, conds = sample_batch(windows, cfg.batch_size, rng, mode)
        loss, grads = diffusion_loss(params.with_weights(weights), batch, conds, sched, rng)
        weights, opt_state = ad.adam_step(weights, grads, opt_state, cfg.lr)
        entries.append(TrainLogEntry(step_offset + m, i, loss, j is not None, j))
    return params.with_weights(weights), opt_state, entries


@dataclass
class ContinualRun:
    params: DenoiserParams
    normalizers: list
    buffers: list
    train_log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (step, DenoiserParams)
    scores: dict = field(default_factory=dict)        # step -> list of per-task scores


def prepare_windows(datasets, seq_len):
    """Split and normalize every task's data; each task gets its own normalizer."""
    raw = [split_windows(d, seq_len) for d in datasets]
    norms = [fit_normalizer(w) for w in raw]
    return [n.normalize_windows(w) for n, w in zip(norms, raw)], norms


def run_continual(datasets, cfg: TrainConfig, den_cfg: DenoiserConfig, evaluate=None,
                  eval_at="boundaries", on_checkpoint=None) -> ContinualRun:
    """Train across tasks in order, freezing a rehearsal buffer after each task.

    ``evaluate(params, normalizers) -> list of per-task scores`` is called at
    step 0 and at every checkpoint (``eval_at='boundaries'``), only after the
    last task (``'final'``) or never (``'none'``).
    """
    dims = {(d.state_dim, d.action_dim) for d in datasets}
    if len(dims) != 1:
        raise ValueError(f"tasks disagree on (d_s, d_a): {sorted(dims)}")
    windows, norms = prepare_windows(datasets, den_cfg.seq_len)
    sched = cfg.schedule()
    params = init_denoiser(den_cfg, cfg.seed)
    if cfg.lora_rank:
        params = attach_lora(params, cfg.lora_rank, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 101])
    run = ContinualRun(params, norms, [])
    delta = cfg.steps_per_task
    n_tasks = len(datasets)

    def checkpoint(step, final=False):
        run.checkpoints.append((step, run.params))
        if on_checkpoint is not None:
            on_checkpoint(step, run)
        if evaluate is not None and (eval_at == "boundaries" or (eval_at == "final" and final)):
            run.scores[step] = list(evaluate(run.params, norms))

    checkpoint(0)
    opt_state = ad.AdamState()
    chunks = max(1, cfg.checkpoints_per_task)
    for i, ws in enumerate(windows):
        for c in range(chunks):
            lo, hi = c * delta // chunks, (c + 1) * delta // chunks
            run.params, opt_state, entries = train_task(
                i, ws, run.buffers, cfg, run.params, sched, rng, opt_state,
                step_offset=i * delta, n_steps=hi - lo, m_offset=lo)
            run.train_log.extend(entries)
            log.info("task %d steps %d-%d loss %.4f", i, lo, hi, np.mean([e.loss for e in entries]))
            if c < chunks - 1:
                checkpoint(i * delta + hi)
        run.buffers.append(build_rehearsal(ws, cfg.xi, cfg.seed))
        checkpoint((i + 1) * delta, final=i == n_tasks - 1)
    return run
