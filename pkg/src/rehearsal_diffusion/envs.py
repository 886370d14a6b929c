"""Directional point-mass task family with a scripted expert.

Each task rewards velocity along a fixed goal direction, an analog of the
Ant-dir family.  State is (x, y, vx, vy); actions are accelerations in
[-1, 1]^2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ANGLES_DEG = (0.0, 120.0, 200.0, 320.0)
STATE_DIM = 4
ACTION_DIM = 2


@dataclass(frozen=True)
class PointDirTask:
    task_id: int
    angle: float
    dt: float = 0.1
    v_max: float = 2.0
    length: int = 200
    # every ``gust_every`` steps the velocity is redrawn uniformly in the
    # v_max disk; 0 disables gusts
    gust_every: int = 0

    @property
    def condition(self) -> np.ndarray:
        return np.array([np.cos(self.angle), np.sin(self.angle)])


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    t: int = 0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def make_tasks(angles_deg=DEFAULT_ANGLES_DEG, **kw) -> list[PointDirTask]:
    return [PointDirTask(i, np.deg2rad(a), **kw) for i, a in enumerate(angles_deg)]


def reset(task: PointDirTask, velocity=None) -> EnvState:
    v = np.zeros(2) if velocity is None else np.asarray(velocity, dtype=np.float64)
    return EnvState(np.zeros(2), v, 0)


def _clip_norm(v, limit):
    n = np.linalg.norm(v)
    return v * (limit / n) if n > limit else v


def step(task: PointDirTask, state: EnvState, action):
    """Advance one step; returns ``(next_state, reward)``."""
    if state.t >= task.length:
        raise RuntimeError(f"episode of task {task.task_id} already finished at t={state.t}")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    v = _clip_norm(state.velocity + a * task.dt, task.v_max)
    x = state.position + v * task.dt
    reward = float(v @ task.condition)
    return EnvState(x, v, state.t + 1), reward


def random_velocity(task: PointDirTask, rng) -> np.ndarray:
    r = task.v_max * np.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    return np.array([r * np.cos(phi), r * np.sin(phi)])


def apply_gust(task: PointDirTask, state: EnvState, rng) -> EnvState:
    """Redraw the velocity when a gust is due at this step counter."""
    if task.gust_every and state.t > 0 and state.t % task.gust_every == 0:
        return EnvState(state.position, random_velocity(task, rng), state.t)
    return state


def expert_action(state: EnvState, task: PointDirTask, gain: float = 5.0) -> np.ndarray:
    return np.clip(gain * (task.v_max * task.condition - state.velocity), -1.0, 1.0)


def gust_rng(seed, task_id, episode):
    return np.random.default_rng([seed, task_id, episode, 1])


def rollout(task: PointDirTask, policy, rng, init_velocity=None, gusts=None):
    """Run one episode; ``policy(state, rng) -> action``.

    ``gusts`` is the generator for velocity perturbations (defaults to
    ``rng``).  Returns (states [L, 4], actions [L, 2], rewards [L]); row t
    holds the state the action was taken in.
    """
    gusts = rng if gusts is None else gusts
    state = reset(task, init_velocity)
    states, actions, rewards = [], [], []
    for _ in range(task.length):
        state = apply_gust(task, state, gusts)
        a = np.clip(policy(state, rng), -1.0, 1.0)
        states.append(state.vector())
        actions.append(a)
        state, r = step(task, state, a)
        rewards.append(r)
    return np.array(states), np.array(actions), np.array(rewards)


def noisy_expert(task: PointDirTask, gain=5.0, noise=0.1):
    def act(state, rng):
        a = expert_action(state, task, gain)
        if noise:
            a = a + noise * rng.standard_normal(2)
        return a

    return act


def collect(task: PointDirTask, n_episodes: int = 50, seed: int = 0, gain: float = 5.0,
            action_noise: float = 0.1, random_start: bool = True):
    """Offline dataset from the (noisy) scripted expert; deterministic in ``seed``."""
    from .datasets import TrajectoryDataset

    if n_episodes < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng([seed, task.task_id])
    policy = noisy_expert(task, gain, action_noise)
    S, A, R = [], [], []
    for _ in range(n_episodes):
        v0 = random_velocity(task, rng) if random_start else None
        s, a, r = rollout(task, policy, rng, v0)
        S.append(s)
        A.append(a)
        R.append(r)
    f32 = np.float32
    return TrajectoryDataset(task.task_id, task.condition, np.array(S, f32), np.array(A, f32), np.array(R, f32))


def expert_return(task: PointDirTask, gain: float = 5.0, seed: int = 0, episodes: int = 1) -> float:
    """Mean episode return of the noiseless expert from rest.

    Gust draws follow ``gust_rng(seed, task_id, episode)`` so that a policy
    evaluated with the same seed faces identical perturbations.
    """
    policy = noisy_expert(task, gain, 0.0)
    rets = [rollout(task, policy, None, gusts=gust_rng(seed, task.task_id, e))[2].sum()
            for e in range(episodes)]
    return float(np.mean(rets))
