"""Trajectory storage, window extraction, normalization and rehearsal buffers."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class TrajectoryDataset:
    task_id: int
    condition: np.ndarray
    states: np.ndarray   # [N, L, d_s]
    actions: np.ndarray  # [N, L, d_a]
    rewards: np.ndarray  # [N, L]

    def __post_init__(self):
        n, length = self.rewards.shape
        if self.states.shape[:2] != (n, length) or self.actions.shape[:2] != (n, length):
            raise ValueError("states, actions and rewards must share [episodes, L]")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def n_episodes(self) -> int:
        return self.rewards.shape[0]

    @property
    def length(self) -> int:
        return self.rewards.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


@dataclass(frozen=True)
class WindowSet:
    """Stack of T_e x (d_s + d_a) windows from one task (states first, then actions)."""

    task_id: int
    condition: np.ndarray
    data: np.ndarray      # [N, T_e, C]
    returns: np.ndarray   # [N] return of the source episode
    return_scale: float = 1.0
    episode: np.ndarray = field(default=None, repr=False)
    offset: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.data.shape[1]

    def conditions(self, idx, cond_mode="task_vector") -> np.ndarray:
        idx = np.asarray(idx)
        if cond_mode == "task_vector":
            return np.broadcast_to(self.condition, (idx.size, self.condition.size)).copy()
        if cond_mode == "return_scalar":
            return (self.returns[idx] / self.return_scale).reshape(-1, 1)
        raise ValueError(f"unknown cond_mode {cond_mode!r}")


def split_windows(traj: TrajectoryDataset, seq_len: int) -> WindowSet:
    """Cut every episode into consecutive windows plus a right-aligned tail window."""
    length = traj.length
    if length < seq_len:
        raise ValueError(f"episode length {length} shorter than window length {seq_len}")
    offsets = list(range(0, length - seq_len + 1, seq_len))
    if length % seq_len:
        offsets.append(length - seq_len)
    joint = np.concatenate([traj.states, traj.actions], axis=2)
    data = np.stack([joint[:, o:o + seq_len] for o in offsets], axis=1)  # [N, n_off, T, C]
    n, n_off = data.shape[:2]
    rets = traj.episode_returns()
    scale = float(np.max(np.abs(rets))) or 1.0
    return WindowSet(
        traj.task_id,
        np.asarray(traj.condition, dtype=np.float64),
        data.reshape(n * n_off, seq_len, -1),
        np.repeat(rets, n_off),
        scale,
        np.repeat(np.arange(n), n_off),
        np.tile(np.asarray(offsets), n),
    )


@dataclass(frozen=True)
class GaussianNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean

    def normalize_windows(self, ws: WindowSet) -> WindowSet:
        return replace(ws, data=self.normalize(ws.data))


def fit_normalizer(windows) -> GaussianNormalizer:
    data = windows.data if isinstance(windows, WindowSet) else np.asarray(windows)
    if data.size == 0:
        raise ValueError("cannot fit a normalizer to no data")
    flat = data.reshape(-1, data.shape[-1]).astype(np.float64)
    return GaussianNormalizer(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))


@dataclass(frozen=True)
class RehearsalBuffer:
    task_id: int
    condition: np.ndarray
    windows: WindowSet
    seed: int
    indices: np.ndarray

    def __len__(self):
        return len(self.windows)

    @property
    def data(self):
        return self.windows.data

    def conditions(self, idx, cond_mode="task_vector"):
        return self.windows.conditions(idx, cond_mode)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.windows.data).tobytes())
        h.update(np.ascontiguousarray(self.windows.returns).tobytes())
        h.update(np.asarray(self.condition, dtype=np.float64).tobytes())
        return h.hexdigest()


def rehearsal_size(n: int, xi: float) -> int:
    # guard against xi * n landing a hair above an integer
    return max(1, math.ceil(round(xi * n, 9)))


def build_rehearsal(windows: WindowSet, xi: float, seed: int) -> RehearsalBuffer:
    """Freeze a uniform xi-fraction subsample (without replacement) of ``windows``."""
    if not 0 < xi <= 1:
        raise ValueError(f"xi must be in (0, 1], got {xi}")
    n = len(windows)
    rng = np.random.default_rng([seed, windows.task_id, 17])
    idx = np.sort(rng.choice(n, rehearsal_size(n, xi), replace=False))
    data = windows.data[idx].copy()
    rets = windows.returns[idx].copy()
    data.flags.writeable = False
    rets.flags.writeable = False
    sub = WindowSet(windows.task_id, windows.condition, data, rets, windows.return_scale)
    return RehearsalBuffer(windows.task_id, windows.condition, sub, seed, idx)


def sample_batch(source, b: int, rng, cond_mode="task_vector"):
    """I.i.d. uniform draws with replacement; returns (batch [b, T_e, C], conditions)."""
    n = len(source)
    if n == 0:
        raise ValueError("cannot sample from an empty source")
    idx = rng.integers(0, n, size=b)
    return source.data[idx], source.conditions(idx, cond_mode)


def corrupt_observations(traj: TrajectoryDataset, eta: float, rho: float, seed: int = 0) -> TrajectoryDataset:
    """States become ``s + clip(eta * g, -rho, rho)`` with g standard normal."""
    if eta < 0 or rho <= 0:
        raise ValueError("need eta >= 0 and rho > 0")
    if eta == 0:
        return traj
    rng = np.random.default_rng([seed, traj.task_id, 23])
    noise = np.clip(eta * rng.standard_normal(traj.states.shape), -rho, rho)
    return replace(traj, states=traj.states + noise)
