"""End-to-end acceptance checks, one test per criterion.

Every test records a PASS/FAIL line that is echoed in the terminal summary.
The forgetting and sensitivity checks train nine desk-scale models and take
most of the suite's runtime.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from rehearsal_diffusion import autodiff as ad
from rehearsal_diffusion import envs
from rehearsal_diffusion import evaluator as ev
from rehearsal_diffusion import persistence as io
from rehearsal_diffusion.datasets import GaussianNormalizer, build_rehearsal, split_windows
from rehearsal_diffusion.denoiser import (DenoiserConfig, attach_lora, init_denoiser, merge_lora,
                                         predict_noise, predict_noise_array)
from rehearsal_diffusion.sampler import GuidanceConfig, ddim_step, ddpm_reverse_step, forward_noise, generate_batch
from rehearsal_diffusion.schedule import linear_schedule
from rehearsal_diffusion.trainer import TrainConfig, run_continual, train_task

from conftest import record_criterion, tiny_config

SCHED = linear_schedule()
GOLDEN = Path(__file__).parent / "golden"

# desk-scale setup for the trend runs
DESK = DenoiserConfig(seq_len=16, hidden=32, conv_mult=(1, 2, 4))
DELTA = 3000
SEEDS = (0, 1, 2)
EPISODES = 50
EVAL_EPISODES = 10
EVAL_SEED = 1000


def _inputs(cfg, b=2, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(b, cfg.seq_len, cfg.channel_dim))
    k = r.integers(1, 201, size=b)
    c = r.normal(size=(b, cfg.cond_dim))
    return x, k, c


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    cfg = tiny_config(dropout_p=0.0)
    with ad.precision(np.float64):
        params = init_denoiser(cfg, 11)
        x, k, c = _inputs(cfg, seed=12)
        target = np.random.default_rng(13).normal(size=x.shape)

        def loss(leaves):
            return ad.mean_square(predict_noise(params, x, k, c, leaves=leaves), target)

        report = ad.gradcheck(loss, params.weights, tol=1e-4, max_entries=8)
    elapsed = time.perf_counter() - t0
    worst = max(report.max_rel_error.values())
    ok = report.passed and worst < 1e-4 and elapsed < 120
    record_criterion(1, ok, f"max rel error {worst:.2e} over {len(report.max_rel_error)} blocks, {elapsed:.1f}s")
    assert ok


def test_criterion_02_sampler_exactness():
    r = np.random.default_rng(20)
    worst = 0.0
    for k in (1, 17, 100, 199, 200):
        tau0, eps = r.normal(size=(4, 16, 6)), r.normal(size=(4, 16, 6))
        out = ddim_step(forward_noise(tau0, k, eps, SCHED), eps, k, 0, SCHED)
        worst = max(worst, float(np.max(np.abs(out - tau0))))
    ddim_ok = worst < 1e-10

    tau1, eps = r.normal(size=(3, 5)), r.normal(size=(3, 5))
    quiet = ddpm_reverse_step(tau1, eps, 1, SCHED, np.zeros_like(tau1))
    loud = ddpm_reverse_step(tau1, eps, 1, SCHED, 1e6 * r.normal(size=tau1.shape))
    ddpm_ok = quiet.tobytes() == loud.tobytes()

    n, k = 100_000, 60
    tau0 = np.array([1.0, -2.0, 0.5])
    samples = forward_noise(np.broadcast_to(tau0, (n, 3)), k, r.standard_normal((n, 3)), SCHED)
    var = 1 - SCHED.alpha_bar[k]
    mean_ok = np.all(np.abs(samples.mean(0) - np.sqrt(SCHED.alpha_bar[k]) * tau0) < 4 * np.sqrt(var / n))
    # sample variance of n normals has relative sd sqrt(2 / n), about 0.0045
    var_ok = np.all(np.abs(samples.var(0) / var - 1) < 4 * np.sqrt(2 / n))
    ok = ddim_ok and ddpm_ok and bool(mean_ok) and bool(var_ok)
    record_criterion(2, ok, f"ddim max err {worst:.1e}, k=1 noise-free {ddpm_ok}, moments {bool(mean_ok and var_ok)}")
    assert ok


def test_criterion_03_strided_speedup():
    params = init_denoiser(DESK, seed=0)
    first = np.zeros((1, 4))
    cond = np.array([[1.0, 0.0]])
    guidance = GuidanceConfig()
    n_gen = 50

    def per_generation(stride):
        rng = np.random.default_rng(0)
        generate_batch(params, first, cond, SCHED, guidance, stride, rng)  # warm-up
        t0 = time.perf_counter()
        for _ in range(n_gen):
            generate_batch(params, first, cond, SCHED, guidance, stride, rng)
        return (time.perf_counter() - t0) / n_gen

    slow = per_generation(1)
    fast = per_generation(10)
    ratio = slow / fast
    ok = fast <= slow / 10
    record_criterion(3, ok, f"stride 1 {slow * 1e3:.1f} ms, stride 10 {fast * 1e3:.1f} ms, speed-up {ratio:.2f}x "
                            f"over {n_gen} generations each")
    assert ok


def test_criterion_04_metric_oracle():
    table = [[0.0, 0.8, 0.6], [0.0, 0.2, 1.0]]
    log = ev.ContinualLog(2, 10, {10 * j: [table[i][j] for i in range(2)] for j in range(3)})
    r = ev.compute_metrics(log)
    # FT_0 = 0.4 - 0.5 (mean of 0 and 0.8), FT_1 = 0.6 - 0.4 (mean of 0.2 and 1.0); F_0 = 0.8 - 0.6
    expected = dict(FT=0.0, F=0.1, P=0.8, combined=0.7)
    hand_ok = all(abs(getattr(r, k) - v) < 1e-9 for k, v in expected.items())
    identity_ok = abs(ev.combine(0.98, 0.89, -0.01) - 1.88) < 1e-9
    ok = hand_ok and identity_ok
    record_criterion(4, ok, f"I=2 example P={r.P:.3f} FT={r.FT:.3f} F={r.F:.3f}, "
                            f"0.98+0.89-(-0.01)={ev.combine(0.98, 0.89, -0.01):.2f}")
    assert ok


def _trend_run(seed, upsilon, xi):
    tasks = envs.make_tasks(gust_every=50)
    data = [envs.collect(t, EPISODES, seed=seed) for t in tasks]
    cfg = TrainConfig(steps_per_task=DELTA, upsilon=upsilon, xi=xi, seed=seed)
    sched = cfg.schedule()

    def evaluate(params, norms):
        return ev.evaluate_tasks(params, norms, tasks, episodes=EVAL_EPISODES, sched=sched, seed=EVAL_SEED)

    run = run_continual(data, cfg, DESK, evaluate=evaluate, eval_at="final")
    return float(np.mean(run.scores[DELTA * len(tasks)]))


@pytest.fixture(scope="module")
def trend():
    """Final all-task score per (upsilon, xi) and seed, plus wall time of the ablation pair."""
    out = {}
    t0 = time.perf_counter()
    for upsilon, xi in [(2, 0.1), (math.inf, 0.1)]:
        out[(upsilon, xi)] = [_trend_run(s, upsilon, xi) for s in SEEDS]
    out["ablation_seconds"] = time.perf_counter() - t0
    out[(2, 0.01)] = [_trend_run(s, 2, 0.01) for s in SEEDS]
    for key, scores in out.items():
        if key != "ablation_seconds":
            print(f"trend {key}: {np.round(scores, 3).tolist()}")
    return out


def test_criterion_05_forgetting_trend(trend):
    replay = float(np.mean(trend[(2, 0.1)]))
    plain = float(np.mean(trend[(math.inf, 0.1)]))
    gain = (replay - plain) / plain if plain > 0 else math.inf
    minutes = trend["ablation_seconds"] / 60
    ok = gain >= 0.30 and minutes < 90
    record_criterion(5, ok, f"rehearsal {replay:.3f} vs none {plain:.3f}, relative gain {gain:+.1%}, "
                            f"{minutes:.1f} min for 6 runs")
    assert ok


def test_criterion_06_sensitivity_direction(trend):
    small = float(np.mean(trend[(2, 0.01)]))
    large = float(np.mean(trend[(2, 0.1)]))
    plain = float(np.mean(trend[(math.inf, 0.1)]))
    ok = large >= small and large > plain
    record_criterion(6, ok, f"xi 0.01 -> {small:.3f}, xi 0.1 -> {large:.3f}, upsilon inf -> {plain:.3f}")
    assert ok


def test_criterion_07_rehearsal_count():
    cfg = TrainConfig(steps_per_task=10, upsilon=2, xi=0.1, batch_size=4, K=20)
    den = tiny_config()
    tasks = envs.make_tasks(length=40)
    windows = [split_windows(envs.collect(t, 3, seed=0), den.seq_len) for t in tasks[:2]]
    buffers = [build_rehearsal(windows[0], cfg.xi, 0)]
    params = init_denoiser(den, 0)
    _, _, log1 = train_task(1, windows[1], buffers, cfg, params, cfg.schedule(), np.random.default_rng(0))
    _, _, log0 = train_task(0, windows[0], [], cfg, params, cfg.schedule(), np.random.default_rng(0))
    n1 = sum(e.was_rehearsal for e in log1)
    n0 = sum(e.was_rehearsal for e in log0)
    ok = len(log1) == 10 and n1 == 5 and n0 == 0
    record_criterion(7, ok, f"task 1: {n1} rehearsal batches in {len(log1)} steps, task 0: {n0}")
    assert ok


def test_criterion_08_lora_noop_and_merge():
    base = init_denoiser(DESK, seed=3)
    x, k, c = _inputs(DESK, b=3, seed=4)
    adapted = attach_lora(base, rank=64, seed=5)
    before = predict_noise_array(base, x, k, c)
    exact = predict_noise_array(adapted, x, k, c).tobytes() == before.tobytes()

    r = np.random.default_rng(6)
    w = dict(adapted.weights)
    for name in w:
        if name.endswith(".lora_B"):
            w[name] = (0.02 * r.normal(size=w[name].shape)).astype(w[name].dtype)
    trained = adapted.with_weights(w)
    gap = float(np.max(np.abs(predict_noise_array(merge_lora(trained), x, k, c)
                              - predict_noise_array(trained, x, k, c))))
    ok = exact and gap < 1e-5
    record_criterion(8, ok, f"fresh rank-64 adapters bit-exact {exact}, merged max gap {gap:.1e}")
    assert ok


def test_criterion_09_inpainting():
    params = init_denoiser(DESK, seed=7)
    r = np.random.default_rng(8)
    rng = np.random.default_rng(9)
    mismatches = 0
    for g in range(100):
        first = r.normal(size=(1, 4)) * 3
        cond = np.array([[math.cos(g), math.sin(g)]])
        out = generate_batch(params, first, cond, SCHED, GuidanceConfig(), 10, rng)
        mismatches += out[0, 0, :4].tobytes() != first[0].tobytes()
    ok = mismatches == 0
    record_criterion(9, ok, f"{100 - mismatches}/100 generations keep the conditioning state bit-exact")
    assert ok


def test_criterion_10_persistence(tmp_path):
    ds = envs.collect(envs.make_tasks()[2], 2, seed=5)
    io.save_dataset(ds, tmp_path / "d1")
    loaded, _ = io.load_dataset(tmp_path / "d1")
    io.save_dataset(loaded, tmp_path / "d2")
    data_ok = all((tmp_path / "d1" / f).read_bytes() == (tmp_path / "d2" / f).read_bytes()
                  for f in ("meta.json", "transitions.bin"))

    params = attach_lora(init_denoiser(tiny_config(), 2), 3)
    r = np.random.default_rng(1)
    norms = [GaussianNormalizer(r.normal(size=6), r.uniform(0.5, 2, size=6)) for _ in range(2)]
    io.save_checkpoint(tmp_path / "c1", params, norms, [[1, 0], [0, 1]], 7, 1, "cfg", "data")
    p2, n2, manifest = io.load_checkpoint(tmp_path / "c1")
    io.save_checkpoint(tmp_path / "c2", p2, n2, manifest["conditions"], 7, 1, "cfg", "data")
    ckpt_ok = all((tmp_path / f"c1{s}").read_bytes() == (tmp_path / f"c2{s}").read_bytes() for s in (".json", ".bin"))

    log = ev.ContinualLog(2, 100, {0: [0.0, 0.25], 100: [0.75, 0.5], 200: [0.5, 1.0]})
    io.write_continual_log(log, tmp_path / "log.csv")
    golden_ok = (tmp_path / "log.csv").read_bytes() == (GOLDEN / "log.csv").read_bytes()
    io.write_metrics(ev.compute_metrics(log), tmp_path / "m.csv")
    header_ok = (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,value"
    ok = data_ok and ckpt_ok and golden_ok and header_ok
    record_criterion(10, ok, f"dataset {data_ok}, checkpoint {ckpt_ok}, golden log {golden_ok}, "
                             f"metrics header {header_ok}")
    assert ok

