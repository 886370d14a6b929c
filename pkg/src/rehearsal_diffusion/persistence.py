"""On-disk formats: dataset directories, checkpoints, CSV logs and SVG curves.

Binary payloads are raw little-endian float32; every manifest is JSON with
sorted keys so that save -> load -> save reproduces identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .datasets import GaussianNormalizer, TrajectoryDataset
from .denoiser import DenoiserConfig, DenoiserParams
from .evaluator import ContinualLog, MetricReport

LE_F32 = np.dtype("<f4")
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


# ------------------------------------------------------------------ datasets

def save_dataset(ds: TrajectoryDataset, directory, meta_extra=None) -> None:
    """``meta.json`` plus ``transitions.bin`` laid out [episode][t][s | a | r]."""
    directory = Path(directory)
    blob = np.concatenate([ds.states, ds.actions, ds.rewards[..., None]], axis=2).astype(LE_F32)
    meta = {
        "format": FORMAT_VERSION,
        "task_id": int(ds.task_id),
        "condition": [float(c) for c in ds.condition],
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "length": ds.length,
        "episodes": ds.n_episodes,
        "blob_bytes": int(blob.nbytes),
    }
    meta.update(meta_extra or {})
    atomic_write(directory / "transitions.bin", blob.tobytes())
    atomic_write(directory / "meta.json", _json_bytes(meta))


def load_dataset(directory):
    """Returns ``(TrajectoryDataset, meta)``."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    raw = (directory / "transitions.bin").read_bytes()
    if len(raw) != meta["blob_bytes"]:
        raise FormatError(f"{directory}: blob has {len(raw)} bytes, manifest says {meta['blob_bytes']}")
    d_s, d_a = meta["state_dim"], meta["action_dim"]
    arr = np.frombuffer(raw, dtype=LE_F32).reshape(meta["episodes"], meta["length"], d_s + d_a + 1)
    ds = TrajectoryDataset(meta["task_id"], np.array(meta["condition"]),
                           arr[..., :d_s].copy(), arr[..., d_s:d_s + d_a].copy(), arr[..., -1].copy())
    return ds, meta


# ------------------------------------------------------------------ checkpoints

def checkpoint_bytes(params: DenoiserParams, normalizers, conditions, step: int, task_index: int,
                     config_hash: str, data_hash: str, extra=None):
    """Serialize to ``(manifest_bytes, blob_bytes)``."""
    index, chunks, offset = [], [], 0
    for name, w in params.weights.items():
        b = np.ascontiguousarray(w, dtype=LE_F32).tobytes()
        index.append({"name": name, "shape": list(w.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    cfg = asdict(params.config)
    cfg["conv_mult"] = list(cfg["conv_mult"])
    manifest = {
        "format": FORMAT_VERSION,
        "config_hash": config_hash,
        "data_hash": data_hash,
        "step": int(step),
        "task_index": int(task_index),
        "denoiser": cfg,
        "lora_rank": params.lora_rank,
        "frozen": sorted(params.frozen),
        "normalizers": [{"mean": [float(x) for x in n.mean], "std": [float(x) for x in n.std]}
                        for n in normalizers],
        "conditions": [[float(c) for c in cond] for cond in conditions],
        "tensors": index,
        "blob_bytes": offset,
    }
    manifest.update(extra or {})
    return _json_bytes(manifest), b"".join(chunks)


def save_checkpoint(path_stem, *args, **kw) -> None:
    manifest, blob = checkpoint_bytes(*args, **kw)
    path_stem = Path(path_stem)
    atomic_write(path_stem.with_suffix(".bin"), blob)
    atomic_write(path_stem.with_suffix(".json"), manifest)


def load_checkpoint(path_stem):
    """Returns ``(params, normalizers, manifest)``."""
    path_stem = Path(path_stem)
    manifest = json.loads(path_stem.with_suffix(".json").read_text())
    blob = path_stem.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["blob_bytes"] or sum(t["nbytes"] for t in manifest["tensors"]) != len(blob):
        raise FormatError(f"{path_stem}: blob length {len(blob)} disagrees with manifest")
    weights = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=LE_F32, count=t["nbytes"] // 4, offset=t["offset"])
        weights[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    d = dict(manifest["denoiser"])
    d["conv_mult"] = tuple(d["conv_mult"])
    params = DenoiserParams(DenoiserConfig(**d), weights, frozenset(manifest["frozen"]), manifest["lora_rank"])
    norms = [GaussianNormalizer(np.array(n["mean"]), np.array(n["std"])) for n in manifest["normalizers"]]
    return params, norms, manifest


def list_checkpoints(run_dir):
    """Checkpoint stems in a run directory sorted by step."""
    stems = [p.with_suffix("") for p in Path(run_dir).glob("ckpt_*.json")]
    return sorted(stems, key=lambda p: int(p.name.split("_")[1]))


# ------------------------------------------------------------------ CSV

LOG_HEADER = ("step", "task", "p")
TRAIN_LOG_HEADER = ("step", "task", "loss", "was_rehearsal", "rehearsal_task")
METRIC_HEADER = ("metric", "value")


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def continual_log_csv(log: ContinualLog) -> bytes:
    return _csv_bytes(LOG_HEADER, [(s, t, repr(p)) for s, t, p in log.rows()])


def write_continual_log(log: ContinualLog, path) -> None:
    atomic_write(path, continual_log_csv(log))


def read_continual_log(path, delta=None) -> ContinualLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != LOG_HEADER:
            raise FormatError(f"{path}: expected header {LOG_HEADER}, got {header}")
        rows = [(int(s), int(t), float(p)) for s, t, p in reader]
    n_tasks = max(t for _, t, _ in rows) + 1
    if delta is None:
        delta = max(s for s, _, _ in rows) // n_tasks
    return ContinualLog.from_rows(rows, delta)


def write_train_log(entries, path) -> None:
    rows = [(e.step, e.task, repr(e.loss), int(e.was_rehearsal),
             "" if e.rehearsal_task is None else e.rehearsal_task) for e in entries]
    atomic_write(path, _csv_bytes(TRAIN_LOG_HEADER, rows))


def metric_rows(report: MetricReport):
    rows = [("P", report.P), ("FT", report.FT), ("F", report.F), ("P+FT-F", report.combined)]
    rows += [(f"FT_{i}", v) for i, v in enumerate(report.FT_i)]
    rows += [(f"F_{i}", v) for i, v in enumerate(report.F_i)]
    return rows


def write_metrics(report: MetricReport, path) -> None:
    atomic_write(path, _csv_bytes(METRIC_HEADER, [(k, repr(float(v))) for k, v in metric_rows(report)]))


def read_metrics(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {k: float(v) for k, v in reader}


# ------------------------------------------------------------------ SVG

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def curves_svg(log: ContinualLog, width=640, height=360, margin=48) -> str:
    """Score-vs-step line per task; dash-dotted verticals mark task switches."""
    steps = log.steps
    x_max = max(steps[-1], 1)
    pw, ph = width - 2 * margin, height - 2 * margin

    def x(s):
        return margin + pw * s / x_max

    def y(p):
        return margin + ph * (1.0 - p)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{margin}" y1="{y(0):.1f}" x2="{width - margin}" y2="{y(0):.1f}" stroke="black"/>',
           f'<line x1="{margin}" y1="{y(0):.1f}" x2="{margin}" y2="{y(1):.1f}" stroke="black"/>']
    for i in range(1, log.n_tasks):
        xs = x(i * log.delta)
        out.append(f'<line class="task-boundary" x1="{xs:.1f}" y1="{y(0):.1f}" x2="{xs:.1f}" y2="{y(1):.1f}" '
                   f'stroke="gray" stroke-dasharray="6,3,1,3"/>')
    for i in range(log.n_tasks):
        pts = " ".join(f"{x(s):.1f},{y(log.p(i, s)):.1f}" for s in steps)
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline class="task-curve" fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{width - margin + 4}" y="{margin + 14 * i}" font-size="11" fill="{color}">task {i}</text>')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="12" text-anchor="middle">gradient step</text>')
    out.append(f'<text x="14" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 14 {height / 2:.0f})" '
               f'text-anchor="middle">score</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(log: ContinualLog, path) -> None:
    atomic_write(path, curves_svg(log).encode())
