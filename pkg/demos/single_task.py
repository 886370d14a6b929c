"""Train the desk model on one direction and score it against the scripted expert.

Takes about two minutes on one core with the default 3000 steps.
"""
import sys
import time

import numpy as np

from rehearsal_diffusion import envs
from rehearsal_diffusion.denoiser import DenoiserConfig
from rehearsal_diffusion.evaluator import evaluate_tasks
from rehearsal_diffusion.trainer import TrainConfig, run_continual

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
task = envs.make_tasks(gust_every=50)[0]
data = [envs.collect(task, 50, seed=0)]
cfg = TrainConfig(steps_per_task=steps, seed=0)
den = DenoiserConfig(seq_len=16, hidden=32, conv_mult=(1, 2, 4))

t0 = time.time()
run = run_continual(data, cfg, den)
losses = [e.loss for e in run.train_log]
print(f"trained {steps} steps in {time.time() - t0:.0f}s, loss {np.mean(losses[:50]):.2f} -> {np.mean(losses[-50:]):.2f}")
score = evaluate_tasks(run.params, run.normalizers, [task], episodes=10, sched=cfg.schedule(), seed=1000)[0]
print(f"normalized score on task 0: {score:.3f}")
