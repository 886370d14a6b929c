"""Command line front end: ``collect``, ``train``, ``eval`` and ``report``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as C
from . import persistence as io
from .datasets import corrupt_observations
from .envs import collect
from .evaluator import ContinualLog, compute_metrics, evaluate_tasks
from .trainer import run_continual

OUT_ENV = "REHEARSAL_DIFFUSION_OUT"
log = logging.getLogger("rehearsal_diffusion")


class CommandError(RuntimeError):
    pass


def resolve_config(args) -> dict:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "no_rehearsal", False):
        overrides.append("train.rehearsal=false")
    if getattr(args, "eta", None) is not None:
        overrides.append(f"data.eta={args.eta}")
    if getattr(args, "rho", None) is not None:
        overrides.append(f"data.rho={args.rho}")
    if getattr(args, "out", None):
        overrides.append(f"run.out_dir={args.out}")
    cfg = C.load_config(args.config, overrides)
    if os.environ.get(OUT_ENV):
        cfg["run"]["out_dir"] = os.environ[OUT_ENV]
    return cfg


def data_dir(cfg) -> Path:
    return Path(cfg["run"]["out_dir"]) / "data"


def load_datasets(cfg, expect_hash=None):
    root = data_dir(cfg)
    dirs = sorted(root.glob("task_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise CommandError(f"no datasets under {root}; run 'collect' first")
    loaded = [io.load_dataset(d) for d in dirs]
    for d, (_, meta) in zip(dirs, loaded):
        if expect_hash is not None and meta.get("data_hash") != expect_hash:
            raise CommandError(f"config hash mismatch: {d} was collected with data hash "
                               f"{meta.get('data_hash')}, expected {expect_hash}")
    return [ds for ds, _ in loaded]


def cmd_collect(cfg, force=False):
    root = data_dir(cfg)
    if root.exists() and any(root.iterdir()) and not force:
        raise CommandError(f"{root} is not empty; pass --force to overwrite")
    d = cfg["data"]
    dhash = C.data_hash(cfg)
    paths = []
    for task in C.tasks_from(cfg):
        ds = collect(task, d["episodes"], seed=cfg["run"]["seed"], gain=cfg["env"]["gain"],
                     action_noise=d["action_noise"])
        if d["eta"] > 0:
            ds = corrupt_observations(ds, d["eta"], d["rho"], seed=cfg["run"]["seed"])
        path = root / f"task_{task.task_id}"
        io.save_dataset(ds, path, {"data_hash": dhash, "seed": cfg["run"]["seed"],
                                   "angle_rad": float(task.angle), "eta": d["eta"], "rho": d["rho"]})
        paths.append(path)
        log.info("collected task %d -> %s", task.task_id, path)
    return paths


def cmd_train(cfg):
    out = Path(cfg["run"]["out_dir"])
    dhash = C.data_hash(cfg)
    chash = C.config_hash(cfg)
    datasets = load_datasets(cfg, expect_hash=dhash)
    den = C.denoiser_config_from(cfg, datasets[0].state_dim, datasets[0].action_dim)
    tcfg = C.train_config_from(cfg)
    conditions = [ds.condition for ds in datasets]
    io.atomic_write(out / "config.ini", C.dumps(cfg).encode())

    def save(step, run):
        task_index = min(step // tcfg.steps_per_task, len(datasets)) if step else 0
        extra = {"buffers": [{"task": b.task_id, "size": len(b), "sha256": b.digest()} for b in run.buffers]}
        io.save_checkpoint(out / f"ckpt_{step:08d}", run.params, run.normalizers, conditions, step,
                           task_index, chash, dhash, extra=extra)

    run = run_continual(datasets, tcfg, den, on_checkpoint=save)
    io.write_train_log(run.train_log, out / "train_log.csv")
    return run


def cmd_eval(cfg, checkpoint=None):
    out = Path(cfg["run"]["out_dir"])
    dhash = C.data_hash(cfg)
    datasets = load_datasets(cfg)
    stems = [Path(checkpoint)] if checkpoint else io.list_checkpoints(out)
    if not stems:
        raise CommandError(f"no checkpoints in {out}")
    tasks = C.tasks_from(cfg)
    e = cfg["eval"]
    scores, delta = {}, cfg["train"]["steps_per_task"]
    for stem in stems:
        params, norms, manifest = io.load_checkpoint(stem)
        if manifest["data_hash"] != dhash:
            raise CommandError(f"config hash mismatch: {stem} was trained on data {manifest['data_hash']}, "
                               f"current config gives {dhash}")
        if len(norms) != len(datasets):
            raise CommandError(f"{stem} has {len(norms)} normalizers for {len(datasets)} datasets")
        sched = C.train_config_from(cfg).schedule()
        scores[manifest["step"]] = evaluate_tasks(params, norms, tasks, e["episodes"], e["stride"],
                                                  e["omega"], e["seed"], sched, cfg["env"]["gain"])
        log.info("step %d scores %s", manifest["step"], scores[manifest["step"]])
    clog = ContinualLog(len(tasks), delta, scores)
    io.write_continual_log(clog, out / "log.csv")
    return clog


def cmd_report(log_path, out_dir=None):
    log_path = Path(log_path)
    out_dir = Path(out_dir) if out_dir else log_path.parent
    clog = io.read_continual_log(log_path)
    report = compute_metrics(clog)
    io.write_metrics(report, out_dir / "metrics.csv")
    io.write_svg(clog, out_dir / "curves.svg")
    return report


def build_parser():
    p = argparse.ArgumentParser(prog="rehearsal-diffusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (run.out_dir)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("collect", help="collect offline datasets with the scripted expert")
    common(sp)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--eta", type=float, help="observation noise level")
    sp.add_argument("--rho", type=float, help="observation noise clip bound")

    sp = sub.add_parser("train", help="continual training over all tasks")
    common(sp)
    sp.add_argument("--no-rehearsal", action="store_true")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--rho", type=float)

    sp = sub.add_parser("eval", help="score every checkpoint on every task")
    common(sp)
    sp.add_argument("--checkpoint", help="evaluate one checkpoint stem only")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--rho", type=float)

    sp = sub.add_parser("report", help="metrics CSV and SVG curves from a log CSV")
    sp.add_argument("log", help="log.csv written by eval")
    sp.add_argument("--out", help="directory for metrics.csv and curves.svg")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "report":
            report = cmd_report(args.log, args.out)
            print(f"P={report.P:.4f} FT={report.FT:.4f} F={report.F:.4f} P+FT-F={report.combined:.4f}")
            return 0
        cfg = resolve_config(args)
        if args.command == "collect":
            cmd_collect(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
    except (CommandError, C.ConfigError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
