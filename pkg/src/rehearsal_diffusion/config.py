"""INI-style run configuration with a closed key schema."""
from __future__ import annotations

import configparser
import hashlib
import json
import math

from .denoiser import DenoiserConfig
from .envs import DEFAULT_ANGLES_DEG, make_tasks
from .trainer import TrainConfig


def _floats(text):
    return tuple(float(x) for x in str(text).replace("(", "").replace(")", "").split(",") if x.strip())


def _ints(text):
    return tuple(int(float(x)) for x in _floats(text))


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _upsilon(text):
    v = str(text).strip().lower()
    return math.inf if v in ("inf", "infinity", "none") else int(v)


# section -> key -> (parser, default); defaults are the full-size model settings
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs/default"),
    },
    "env": {
        "angles_deg": (_floats, DEFAULT_ANGLES_DEG),
        "dt": (float, 0.1),
        "v_max": (float, 2.0),
        "length": (int, 200),
        "gain": (float, 5.0),
        "gust_every": (int, 50),
    },
    "data": {
        "episodes": (int, 50),
        "action_noise": (float, 0.1),
        "eta": (float, 0.0),
        "rho": (float, 1.0),
    },
    "model": {
        "seq_len": (int, 48),
        "hidden": (int, 128),
        "conv_mult": (_ints, (1, 4, 8)),
        "n_mid": (int, 2),
        "cond_mode": (str, "task_vector"),
        "dropout_p": (float, 0.25),
        "kernel_size": (int, 5),
        "groups": (int, 8),
        "lora_rank": (int, 0),
    },
    "train": {
        "steps_per_task": (int, 3000),
        "batch_size": (int, 32),
        "lr": (float, 3e-4),
        "rehearsal": (_bool, True),
        "upsilon": (_upsilon, 2),
        "xi": (float, 0.1),
        "K": (int, 200),
        "beta_min": (float, 1e-4),
        "beta_max": (float, 0.02),
        "checkpoints_per_task": (int, 1),
    },
    "eval": {
        "episodes": (int, 10),
        "stride": (int, 10),
        "omega": (float, 1.2),
        "seed": (int, 1000),
    },
}

DATA_SECTIONS = ("env", "data")


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    return {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


def _coerce(section, key, value):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parser = SCHEMA[section][key][0]
    try:
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.setdefault(section, {})[key] = _coerce(section, key, value)
    for item in overrides:
        name, _, value = item.partition("=")
        section, _, key = name.partition(".")
        if not key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.setdefault(section, {})[key] = _coerce(section, key, value)
    return cfg


def _canonical(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, tuple):
        return [_canonical(v) for v in value]
    return value


def dumps(cfg: dict) -> str:
    """INI text that ``load_config`` parses back to the same dict."""
    lines = []
    for section in SCHEMA:
        lines.append(f"[{section}]")
        for key in SCHEMA[section]:
            v = cfg[section][key]
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float) and math.isinf(v):
                v = "inf"
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: dict, sections=None) -> str:
    sections = list(SCHEMA) if sections is None else sections
    sub = {s: {k: _canonical(v) for k, v in cfg[s].items() if k != "out_dir"} for s in sections}
    return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]


def data_hash(cfg: dict) -> str:
    """Hash of everything that determines the collected datasets."""
    sub = {"env": cfg["env"], "data": cfg["data"], "run": {"seed": cfg["run"]["seed"]}}
    return config_hash(sub, ["env", "data", "run"])


def tasks_from(cfg: dict):
    e = cfg["env"]
    return make_tasks(e["angles_deg"], dt=e["dt"], v_max=e["v_max"], length=e["length"],
                      gust_every=e["gust_every"])


def denoiser_config_from(cfg: dict, state_dim=4, action_dim=2) -> DenoiserConfig:
    m = cfg["model"]
    levels = len(m["conv_mult"])
    return DenoiserConfig(
        seq_len=m["seq_len"], state_dim=state_dim, action_dim=action_dim, hidden=m["hidden"],
        conv_mult=tuple(m["conv_mult"]), n_down=levels, n_mid=m["n_mid"], n_up=levels - 1,
        cond_dim=2 if m["cond_mode"] == "task_vector" else 1, cond_mode=m["cond_mode"],
        dropout_p=m["dropout_p"], kernel_size=m["kernel_size"], groups=m["groups"])


def train_config_from(cfg: dict) -> TrainConfig:
    t, e = cfg["train"], cfg["eval"]
    return TrainConfig(
        steps_per_task=t["steps_per_task"], batch_size=t["batch_size"], lr=t["lr"],
        upsilon=t["upsilon"] if t["rehearsal"] else math.inf, xi=t["xi"], K=t["K"],
        beta_min=t["beta_min"], beta_max=t["beta_max"], omega=e["omega"], stride=e["stride"],
        seed=cfg["run"]["seed"], lora_rank=cfg["model"]["lora_rank"],
        checkpoints_per_task=t["checkpoints_per_task"])
