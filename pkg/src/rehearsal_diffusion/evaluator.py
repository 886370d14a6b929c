"""Receding-horizon evaluation and continual-learning metrics (P, FT, F)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs
from .sampler import GuidanceConfig, generate_batch
from .schedule import NoiseSchedule

AUC_REF = 0.5


def eval_condition(task: envs.PointDirTask, cond_mode: str) -> np.ndarray:
    if cond_mode == "task_vector":
        return task.condition
    # return-conditioned models ask for the best normalized return
    return np.array([1.0])


def rollout_returns(params, normalizers, tasks, episodes, sched: NoiseSchedule, guidance: GuidanceConfig,
                    stride: int, seed: int):
    """Run ``episodes`` receding-horizon episodes per task, all batched together.

    At every env step each episode gets a freshly generated window whose first
    state is the normalized current state; the first action is executed.
    Returns an array [len(tasks), episodes] of episode returns.
    """
    cfg = params.config
    d_s = cfg.state_dim
    slots = [(ti, e) for ti in range(len(tasks)) for e in range(episodes)]
    states = [envs.reset(tasks[ti]) for ti, _ in slots]
    gusts = [envs.gust_rng(seed, tasks[ti].task_id, e) for ti, e in slots]
    rng = np.random.default_rng([seed, 3])
    conds = np.array([eval_condition(tasks[ti], cfg.cond_mode) for ti, _ in slots])
    mean = np.array([normalizers[tasks[ti].task_id].mean for ti, _ in slots])
    std = np.array([normalizers[tasks[ti].task_id].std for ti, _ in slots])
    returns = np.zeros(len(slots))
    length = max(t.length for t in tasks)
    for _ in range(length):
        live = [n for n, (ti, _) in enumerate(slots) if states[n].t < tasks[ti].length]
        if not live:
            break
        for n in live:
            states[n] = envs.apply_gust(tasks[slots[n][0]], states[n], gusts[n])
        obs = np.array([states[n].vector() for n in live])
        first = (obs - mean[live, :d_s]) / std[live, :d_s]
        window = generate_batch(params, first, conds[live], sched, guidance, stride, rng)
        actions = window[:, 0, d_s:] * std[live, d_s:] + mean[live, d_s:]
        for a, n in zip(actions, live):
            states[n], r = envs.step(tasks[slots[n][0]], states[n], a)
            returns[n] += r
    return returns.reshape(len(tasks), episodes)


def score_returns(returns, reference) -> float:
    return float(np.clip(np.mean(returns) / reference, 0.0, 1.0))


def evaluate_tasks(params, normalizers, tasks, episodes=10, stride=10, omega=1.2, seed=0,
                   sched: NoiseSchedule | None = None, gain=5.0):
    """Normalized score in [0, 1] for every task (mean return / expert return)."""
    if sched is None:
        from .schedule import linear_schedule
        sched = linear_schedule()
    rets = rollout_returns(params, normalizers, tasks, episodes, sched, GuidanceConfig(omega), stride, seed)
    return [score_returns(r, envs.expert_return(t, gain, seed, episodes)) for r, t in zip(rets, tasks)]


def evaluate_task(params, normalizer, task, episodes=10, stride=10, omega=1.2, seed=0, sched=None):
    norms = {task.task_id: normalizer}
    return evaluate_tasks(params, norms, [task], episodes, stride, omega, seed, sched)[0]


# ------------------------------------------------------------------ metrics

@dataclass
class ContinualLog:
    """Scores p[i][step] of task i at each checkpoint step; the grid holds i * delta for i = 0..I."""

    n_tasks: int
    delta: int
    scores: dict  # step -> sequence of n_tasks scores

    def __post_init__(self):
        for step, row in self.scores.items():
            if len(row) != self.n_tasks:
                raise ValueError(f"step {step}: expected {self.n_tasks} scores, got {len(row)}")
            if any(not 0.0 <= p <= 1.0 for p in row):
                raise ValueError(f"step {step}: scores must lie in [0, 1]")

    @property
    def steps(self):
        return sorted(self.scores)

    def p(self, task: int, step: int) -> float:
        try:
            return float(self.scores[step][task])
        except KeyError:
            raise KeyError(f"no checkpoint at step {step}") from None

    def rows(self):
        """(step, task, p) rows ordered by step then task."""
        return [(s, i, float(self.scores[s][i])) for s in self.steps for i in range(self.n_tasks)]

    @classmethod
    def from_rows(cls, rows, delta: int):
        rows = list(rows)
        n_tasks = max(int(t) for _, t, _ in rows) + 1
        scores = {}
        for s, t, p in rows:
            scores.setdefault(int(s), [None] * n_tasks)[int(t)] = float(p)
        for s, row in scores.items():
            if any(v is None for v in row):
                raise ValueError(f"step {s} is missing task scores")
        return cls(n_tasks, delta, scores)


@dataclass
class MetricReport:
    P: float
    FT: float
    F: float
    combined: float
    FT_i: list
    F_i: list


def compute_metrics(log: ContinualLog) -> MetricReport:
    """P (mean final score), forward transfer against a 0.5 reference, forgetting."""
    n, d = log.n_tasks, log.delta
    final = n * d
    P = float(np.mean([log.p(i, final) for i in range(n)]))
    ft, fg = [], []
    for i in range(n):
        auc = (log.p(i, i * d) + log.p(i, (i + 1) * d)) / 2.0
        ft.append((auc - AUC_REF) / (1.0 - AUC_REF))
        fg.append(log.p(i, (i + 1) * d) - log.p(i, final))
    FT, F = float(np.mean(ft)), float(np.mean(fg))
    return MetricReport(P, FT, F, P + FT - F, ft, fg)


def combine(P: float, FT: float, F: float) -> float:
    return P + FT - F
