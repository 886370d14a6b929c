"""Temporal U-Net noise predictor with time/condition embeddings and LoRA."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

COND_MODES = ("task_vector", "return_scalar")
BLOCK_PREFIXES = ("down", "mid", "up")


@dataclass(frozen=True)
class DenoiserConfig:
    seq_len: int = 48
    state_dim: int = 4
    action_dim: int = 2
    hidden: int = 128
    conv_mult: tuple = (1, 4, 8)
    n_down: int = 3
    n_mid: int = 2
    n_up: int = 2
    cond_dim: int = 2
    cond_mode: str = "task_vector"
    dropout_p: float = 0.25
    kernel_size: int = 5
    groups: int = 8

    @property
    def channel_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def dims(self) -> list[int]:
        return [self.channel_dim] + [self.hidden * m for m in self.conv_mult]

    def validate(self) -> None:
        levels = len(self.conv_mult)
        if levels < 1:
            raise ValueError("conv_mult must be nonempty")
        if self.n_down != levels or self.n_up != levels - 1:
            raise ValueError(
                f"n_down must equal len(conv_mult)={levels} and n_up must be {levels - 1}; "
                f"got n_down={self.n_down}, n_up={self.n_up}")
        if self.n_mid < 1:
            raise ValueError("need at least one middle block")
        factor = 2 ** (levels - 1)
        if self.seq_len % factor:
            raise ValueError(f"seq_len={self.seq_len} must be divisible by {factor} for {levels} U-Net levels")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}")
        if self.cond_mode == "return_scalar" and self.cond_dim != 1:
            raise ValueError("return_scalar conditioning needs cond_dim == 1")
        for d in self.dims[1:]:
            if d % self.groups:
                raise ValueError(f"channel width {d} not divisible by groups={self.groups}")


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    weights: dict
    frozen: frozenset = field(default_factory=frozenset)
    lora_rank: int | None = None

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.weights if k not in self.frozen]

    def with_weights(self, weights) -> "DenoiserParams":
        return replace(self, weights=weights)

    def count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))


# ------------------------------------------------------------ initialization

def _layer_shapes(cfg: DenoiserConfig):
    """Ordered (name, shape, fan_in) for every weight of the network."""
    h, k, e = cfg.hidden, cfg.kernel_size, cfg.hidden
    shapes = []

    def dense(name, n_in, n_out):
        shapes.append((f"{name}.w", (n_out, n_in), n_in))
        shapes.append((f"{name}.b", (n_out,), n_in))

    def conv(name, c_in, c_out, w):
        shapes.append((f"{name}.w", (c_out, c_in, w), c_in * w))
        shapes.append((f"{name}.b", (c_out,), c_in * w))

    def norm(name, c):
        shapes.append((f"{name}.g", (c,), None))
        shapes.append((f"{name}.b", (c,), None))

    def resblock(name, c_in, c_out):
        conv(f"{name}.conv1", c_in, c_out, k)
        norm(f"{name}.norm1", c_out)
        dense(f"{name}.emb", e, c_out)
        conv(f"{name}.conv2", c_out, c_out, k)
        norm(f"{name}.norm2", c_out)
        if c_in != c_out:
            conv(f"{name}.skip", c_in, c_out, 1)

    dense("time.fc1", h, 2 * h)
    dense("time.fc2", 2 * h, e)
    dense("cond.fc1", cfg.cond_dim, h)
    dense("cond.fc2", h, e)
    dims = cfg.dims
    pairs = list(zip(dims[:-1], dims[1:]))
    for i, (din, dout) in enumerate(pairs):
        resblock(f"down{i}.res", din, dout)
        if i < len(pairs) - 1:
            conv(f"down{i}.sample", dout, dout, 3)
    for j in range(cfg.n_mid):
        resblock(f"mid{j}.res", dims[-1], dims[-1])
    for i, (din, dout) in enumerate(reversed(pairs[1:])):
        resblock(f"up{i}.res", 2 * dout, din)
        # transposed conv kernel is [C_in, C_out, W]
        shapes.append((f"up{i}.sample.w", (din, din, 4), din * 4))
        shapes.append((f"up{i}.sample.b", (din,), din * 4))
    conv("final.conv", dims[1], dims[1], k)
    norm("final.norm", dims[1])
    conv("final.out", dims[1], cfg.channel_dim, 1)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    return int(sum(np.prod(s) for _, s, _ in _layer_shapes(cfg)))


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = ad.get_dtype()
    weights = {}
    for name, shape, fan_in in _layer_shapes(cfg):
        if fan_in is None:
            val = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            val = rng.uniform(-bound, bound, size=shape)
        weights[name] = val.astype(dtype)
    return DenoiserParams(cfg, weights)


# ------------------------------------------------------------ LoRA

def lora_targets(params: DenoiserParams) -> list[str]:
    return [n for n, w in params.weights.items()
            if n.startswith(BLOCK_PREFIXES) and n.endswith(".w") and w.ndim >= 2 and ".lora_" not in n]


def attach_lora(params: DenoiserParams, rank: int = 64, seed: int = 0) -> DenoiserParams:
    """Add low-rank paths B @ A to every block weight and freeze those weights.

    B starts at zero so the adapted model initially equals the base model.
    """
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    if params.lora_rank is not None:
        raise ValueError("LoRA adapters are already attached")
    rng = np.random.default_rng(seed)
    weights = dict(params.weights)
    targets = lora_targets(params)
    for name in targets:
        w = params.weights[name]
        n_out, n_in = w.shape[0], int(np.prod(w.shape[1:]))
        weights[f"{name}.lora_A"] = (rng.standard_normal((rank, n_in)) / np.sqrt(n_in)).astype(w.dtype)
        weights[f"{name}.lora_B"] = np.zeros((n_out, rank), dtype=w.dtype)
    return replace(params, weights=weights, frozen=frozenset(params.frozen | set(targets)), lora_rank=rank)


def merge_lora(params: DenoiserParams) -> DenoiserParams:
    if params.lora_rank is None:
        raise ValueError("no LoRA adapters to merge")
    weights = {}
    for name, w in params.weights.items():
        if ".lora_" in name:
            continue
        a = params.weights.get(f"{name}.lora_A")
        if a is not None:
            b = params.weights[f"{name}.lora_B"]
            w = (w.astype(np.float64) + (b.astype(np.float64) @ a.astype(np.float64)).reshape(w.shape)).astype(w.dtype)
        weights[name] = w
    frozen = frozenset(n for n in params.frozen if n in weights) - set(lora_targets(params))
    return replace(params, weights=weights, frozen=frozen, lora_rank=None)


# ------------------------------------------------------------ forward

def _weight(P, name):
    w = P[name]
    a = P.get(f"{name}.lora_A")
    if a is None:
        return w
    delta = ad.matmul(P[f"{name}.lora_B"], a)
    return ad.add(w, ad.reshape(delta, w.shape))


def _dense(P, name, x):
    return ad.dense(x, _weight(P, f"{name}.w"), P[f"{name}.b"])


def _conv(P, name, x, stride=1):
    w = _weight(P, f"{name}.w")
    return ad.conv1d(x, w, P[f"{name}.b"], stride=stride, padding=(w.shape[2] - 1) // 2 if stride == 1 else 1)


def _norm_act(P, name, x, groups):
    return ad.silu(ad.group_norm(x, groups, P[f"{name}.g"], P[f"{name}.b"]))


def _resblock(P, name, x, emb_act, groups):
    h = _norm_act(P, f"{name}.norm1", _conv(P, f"{name}.conv1", x), groups)
    e = _dense(P, f"{name}.emb", emb_act)
    h = ad.add(h, ad.reshape(e, e.shape + (1,)))
    h = _norm_act(P, f"{name}.norm2", _conv(P, f"{name}.conv2", h), groups)
    res = _conv(P, f"{name}.skip", x) if f"{name}.skip.w" in P else x
    return ad.add(h, res)


def _embed(P, cfg, steps, cond):
    t = ad.sinusoidal_encode(steps, cfg.hidden)
    t = _dense(P, "time.fc2", ad.silu(_dense(P, "time.fc1", t)))
    c = _dense(P, "cond.fc2", ad.silu(_dense(P, "cond.fc1", cond)))
    return ad.add(t, c)


def forward(P: dict, cfg: DenoiserConfig, tau, steps, cond):
    """Network graph on leaf tensors ``P``; ``cond`` rows already zeroed where dropped."""
    g = cfg.groups
    x = ad.transpose(ad.as_tensor(tau), (0, 2, 1))
    emb_act = ad.silu(_embed(P, cfg, steps, ad.as_tensor(cond)))
    n_levels = len(cfg.conv_mult)
    skips = []
    for i in range(n_levels):
        x = _resblock(P, f"down{i}.res", x, emb_act, g)
        skips.append(x)
        if i < n_levels - 1:
            x = _conv(P, f"down{i}.sample", x, stride=2)
    for j in range(cfg.n_mid):
        x = _resblock(P, f"mid{j}.res", x, emb_act, g)
    for i in range(n_levels - 1):
        x = ad.concat([x, skips.pop()], axis=1)
        x = _resblock(P, f"up{i}.res", x, emb_act, g)
        w = _weight(P, f"up{i}.sample.w")
        x = ad.conv_transpose1d(x, w, P[f"up{i}.sample.b"], stride=2, padding=1)
    x = _norm_act(P, "final.norm", _conv(P, "final.conv", x), g)
    x = _conv(P, "final.out", x)
    return ad.transpose(x, (0, 2, 1))


def _prepare_inputs(cfg, tau_k, k, cond, cond_dropped):
    tau_k = np.asarray(tau_k)
    b = tau_k.shape[0]
    if tau_k.ndim != 3 or tau_k.shape[1:] != (cfg.seq_len, cfg.channel_dim):
        raise ad.ShapeError(f"tau must be [B, {cfg.seq_len}, {cfg.channel_dim}], got {tau_k.shape}")
    k = np.broadcast_to(np.asarray(k), (b,))
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape != (b, cfg.cond_dim):
        raise ad.ShapeError(f"condition must be [B={b}, cond_dim={cfg.cond_dim}], got {cond.shape}")
    if cond_dropped is not None:
        mask = np.broadcast_to(np.asarray(cond_dropped, dtype=bool), (b,))
        cond = np.where(mask[:, None], 0.0, cond)
    return tau_k, k, cond


def predict_noise(params: DenoiserParams, tau_k, k, cond, cond_dropped=None, leaves=None):
    """Noise prediction eps_theta(tau^k, C, k) as a graph Tensor [B, T_e, C].

    Rows with ``cond_dropped`` use the null (all-zero) condition.  Pass
    ``leaves`` (name -> parameter Tensor) to differentiate w.r.t. weights.
    """
    cfg = params.config
    tau_k, k, cond = _prepare_inputs(cfg, tau_k, k, cond, cond_dropped)
    if leaves is None:
        leaves = {n: ad.Tensor(w) for n, w in params.weights.items()}
    return forward(leaves, cfg, tau_k, k, cond)


def predict_noise_array(params: DenoiserParams, tau_k, k, cond, cond_dropped=None):
    with ad.no_grad():
        out = predict_noise(params, tau_k, k, cond, cond_dropped)
    return out.data.astype(np.float64)


def embed_condition(params: DenoiserParams, raw):
    """Condition embedding for raw task vectors or normalized returns, shape [B, hidden].

    An all-zero ``raw`` row yields the null embedding used for guidance.
    """
    cfg = params.config
    raw = np.asarray(raw, dtype=np.float64)
    if cfg.cond_mode == "task_vector":
        if raw.shape[-1] != cfg.cond_dim or raw.ndim > 2:
            raise ValueError(f"task_vector mode expects vectors of length {cfg.cond_dim}, got shape {raw.shape}")
        raw = raw.reshape(-1, cfg.cond_dim)
    else:
        if raw.ndim == 2 and raw.shape[1] != 1 or raw.ndim > 2:
            raise ValueError(f"return_scalar mode expects scalars, got shape {raw.shape}")
        raw = raw.reshape(-1, 1)
    P = {n: ad.Tensor(w) for n, w in params.weights.items()}
    with ad.no_grad():
        c = _dense(P, "cond.fc2", ad.silu(_dense(P, "cond.fc1", raw)))
    return c.data
