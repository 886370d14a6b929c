"""Minimal dense tensors with reverse-mode differentiation.

Only the primitives the temporal U-Net needs are provided: conv1d,
transposed conv1d, affine maps, SiLU, group normalization, add, mul,
concat, reshape/transpose, matmul and mean-square reduction.  Every node
stores its output and a closure that pushes the output gradient back to
its inputs; ``backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Switch the global float mode (``np.float32`` or ``np.float64``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Build no backward closures inside this block (evaluation only)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending dimension."""


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "name", "op")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data, parents, backward_fn, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, None, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), back, "mul")


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def back(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _node(out, (x,), back, "silu")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), back, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def back(g):
        return (np.transpose(g, inv),)

    return _node(out, (x,), back, "transpose")


def concat(tensors, axis) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for d, (n, m) in enumerate(zip(ref, t.shape)):
            if d != axis % len(ref) and n != m:
                raise ShapeError(f"concat: dimension {d} differs ({n} vs {m})")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), back, "concat")


def slice_axis(x, axis, start, stop) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(out, (x,), back, "slice")


def pad_axis(x, axis, before, after) -> Tensor:
    x = as_tensor(x)
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (before, after)
    out = np.pad(x.data, widths)
    n = x.shape[axis]

    def back(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)

    return _node(out, (x,), back, "pad")


# ---------------------------------------------------------------- reductions

def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _node(np.asarray(x.data.sum()), (x,), back, "sum")


def mean_square(a, b=None) -> Tensor:
    """Mean of ``(a - b)**2`` over every element (``b`` defaults to zero)."""
    a = as_tensor(a)
    diff = a.data if b is None else a.data - as_tensor(b).data
    if b is not None and as_tensor(b).shape != a.shape:
        raise ShapeError(f"mean_square: shapes {a.shape} and {as_tensor(b).shape} differ")
    n = diff.size
    out = np.asarray(np.mean(diff * diff))
    parents = (a,) if b is None else (a, as_tensor(b))

    def back(g):
        ga = g * (2.0 / n) * diff
        return (ga,) if b is None else (ga, -ga)

    return _node(out, parents, back, "mean_square")


# ---------------------------------------------------------------- linear maps

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
        raise ShapeError(f"matmul: inner dimension {a.shape[-1]} vs {b.shape[0]}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(out, (a, b), back, "matmul")


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense: input features {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, back, "dense")


def _im2col(x, width, stride, l_out):
    # [B, C, Lp] -> [B, L_out, C*W]
    win = np.lib.stride_tricks.sliding_window_view(x, width, axis=2)[:, :, ::stride][:, :, :l_out]
    return win.transpose(0, 2, 1, 3).reshape(x.shape[0], l_out, -1)


def _col2im(cols, channels, width, stride, length):
    # [B, L_out, C*W] -> [B, C, length], summing overlapping windows
    b, l_out, _ = cols.shape
    cols = cols.reshape(b, l_out, channels, width)
    out = np.zeros((b, channels, length), dtype=cols.dtype)
    span = stride * (l_out - 1) + 1
    for w in range(width):
        out[:, :, w:w + span:stride] += cols[:, :, :, w].transpose(0, 2, 1)
    return out


def conv1d_output_length(length, width, stride=1, padding=0):
    return (length + 2 * padding - width) // stride + 1


def conv1d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, L] with ``kernel`` [C_out, C_in, W]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d: input must be [B, C_in, L], got {x.shape}")
    c_out, c_in, width = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input channels C_in={x.shape[1]} but kernel expects {c_in}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    length = x.shape[2]
    if width > length + 2 * padding:
        raise ShapeError(f"conv1d: kernel width W={width} exceeds padded length {length + 2 * padding}")
    l_out = conv1d_output_length(length, width, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _im2col(xp, width, stride, l_out)
    kmat = kernel.data.reshape(c_out, -1)
    out = (cols @ kmat.T).transpose(0, 2, 1)
    parents = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents = (x, kernel, bias)
    out = np.ascontiguousarray(out)

    def back(g):
        gt = g.transpose(0, 2, 1)  # [B, L_out, C_out]
        gk = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * width)).reshape(kernel.shape)
        gcols = gt @ kmat
        gxp = _col2im(gcols, c_in, width, stride, xp.shape[2])
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2))

    return _node(out, parents, back, "conv1d")


def conv_transpose1d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``kernel`` has shape [C_in, C_out, W].

    Output length is ``(L - 1) * stride - 2 * padding + W``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3:
        raise ShapeError(f"conv_transpose1d: input must be [B, C_in, L], got {x.shape}")
    c_in, c_out, width = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose1d: input channels C_in={x.shape[1]} but kernel expects {c_in}")
    length = x.shape[2]
    full = (length - 1) * stride + width
    l_out = full - 2 * padding
    if l_out < 1:
        raise ShapeError(f"conv_transpose1d: padding {padding} leaves no output")
    kmat = kernel.data.reshape(c_in, -1)  # [C_in, C_out*W]
    xt = x.data.transpose(0, 2, 1)  # [B, L, C_in]
    cols = xt @ kmat  # [B, L, C_out*W]
    out = _col2im(cols, c_out, width, stride, full)[:, :, padding:padding + l_out]
    parents = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents = (x, kernel, bias)
    out = np.ascontiguousarray(out)

    def back(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding))) if padding else g
        gcols = _im2col(gfull, width, stride, length)  # [B, L, C_out*W]
        gx = (gcols @ kmat.T).transpose(0, 2, 1)
        gk = (xt.reshape(-1, c_in).T @ gcols.reshape(-1, c_out * width)).reshape(kernel.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2))

    return _node(out, parents, back, "conv_transpose1d")


def group_norm(x, groups, gamma, beta, eps=1e-5) -> Tensor:
    """Group normalization over [B, C, L] with per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    b, c, length = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: channels C={c} not divisible by groups={groups}")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, c, length)
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]
    n = xg.shape[2]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = (g * gamma.data[None, :, None]).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv / n * (n * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(b, c, length), ggamma, gbeta

    return _node(out, (x, gamma, beta), back, "group_norm")


def sinusoidal_encode(steps, dim) -> Tensor:
    """Fixed sinusoidal features of integer diffusion steps, shape [B, dim]."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = steps[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))


# ---------------------------------------------------------------- backward

def topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Gradients of scalar ``loss`` for every leaf in ``params``.

    ``params`` is a mapping name -> leaf Tensor (or a sequence of leaves).
    Leaves the loss does not depend on receive zero gradients.  Returns a
    dict keyed like ``params``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(topological_order(loss)):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if params is None:
        return grads
    items = params.items() if isinstance(params, dict) else enumerate(params)
    out = {}
    for key, leaf in items:
        g = grads.get(id(leaf))
        out[key] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
    return out


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update.  Returns ``(new_params, state)``.

    Parameters missing from ``grads`` are left untouched (frozen).
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[name] = (p - upd).astype(p.dtype)
    return new, state


# ---------------------------------------------------------------- gradcheck

@dataclass
class GradcheckReport:
    max_rel_error: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def gradcheck(forward_fn, params: dict, tol=1e-4, step=1e-5, max_entries=None, seed=0) -> GradcheckReport:
    """Compare analytic gradients to central finite differences.

    ``forward_fn(leaves)`` receives a dict of leaf Tensors and returns a scalar
    Tensor.  Relative error per entry is ``|a - n| / max(|a| + |n|, 1e-8)``;
    the report keeps the worst entry per parameter block.  With
    ``max_entries`` only a random subset of each block is probed.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        leaves = {k: parameter(v, name=k) for k, v in base.items()}
        analytic = backward(forward_fn(leaves), leaves)
        report = {}
        for name, arr in base.items():
            flat_idx = np.arange(arr.size)
            if max_entries is not None and arr.size > max_entries:
                flat_idx = rng.choice(arr.size, max_entries, replace=False)
            worst = 0.0
            for i in flat_idx:
                idx = np.unravel_index(i, arr.shape)
                vals = []
                for sgn in (1.0, -1.0):
                    probe = dict(base)
                    pert = arr.copy()
                    pert[idx] += sgn * step
                    probe[name] = pert
                    with no_grad():
                        vals.append(float(forward_fn({k: Tensor(v) for k, v in probe.items()}).data))
                num = (vals[0] - vals[1]) / (2 * step)
                a = float(analytic[name][idx])
                err = abs(a - num) / max(abs(a) + abs(num), 1e-8)
                worst = max(worst, err)
            report[name] = worst
    return GradcheckReport(report, tol)
