"""Float32 tensor substrate with tape-based reverse-mode gradients.

Every differentiable operation runs eagerly on NumPy float32 arrays and,
while a GradTape is active, appends a backward closure to the tape.
GradTape.backward replays the closures in reverse recording order, which
is a valid topological order because the graph is built eagerly.

Broadcasting is deliberately narrow: same shape, scalar, or a trailing
per-channel vector. Everything else is a ShapeError so the finite
difference oracles stay small.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

F32 = np.float32
RMSNORM_EPS = 1e-6


class Tensor:
    """Dense float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=F32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class GradTape:
    """Ordered record of backward closures for one forward computation."""

    _ACTIVE: "GradTape | None" = None

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._prev: GradTape | None = None

    def __enter__(self) -> "GradTape":
        self._prev = GradTape._ACTIVE
        GradTape._ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        GradTape._ACTIVE = self._prev

    def record(self, out: "Tensor", fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, fn))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every tensor reachable from loss; leaves keep theirs."""
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones((), dtype=F32)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F32))


def _record(out: Tensor, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = GradTape._ACTIVE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # out-of-place accumulation: closures may hand the same buffer to two parents
    t.grad = g if t.grad is None else t.grad + g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (undoes the narrow broadcast set of add/mul)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=F32)
    # trailing per-channel vector
    axes = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=axes).astype(F32)


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    if b.shape == a.shape[-1:] or a.shape == b.shape[-1:]:
        return
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.data.shape} by {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose2(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2 needs a matrix, got shape {x.data.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def bwd(g):
        _accum(x, np.ascontiguousarray(g.T))

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), bwd)


def concat0(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bwd(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[s:e])

    return _record(out, parts, bwd)


def concat1(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bwd(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, np.ascontiguousarray(g[:, s:e]))

    return _record(out, parts, bwd)


def slice_cols(x: Tensor, start: int, end: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data[:, start:end]))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:end] = g
        _accum(x, gx)

    return _record(out, (x,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather; gradient scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.data.shape[0]} rows")
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _record(out, (table,), bwd)


# row gather on arbitrary matrices shares the embedding-lookup gradient
gather_rows = embedding


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (C,h,w) + b (C,) broadcast over the spatial axes."""
    if x.data.ndim != 3 or b.data.shape != (x.data.shape[0],):
        raise ShapeError(f"add_channel_bias: {x.data.shape} vs bias {b.data.shape}")
    out = Tensor(x.data + b.data[:, None, None])

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(1, 2)).astype(F32))

    return _record(out, (x, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=F32))

    def bwd(g):
        _accum(x, np.full_like(x.data, g))

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=F32))

    def bwd(g):
        _accum(x, np.full_like(x.data, g / n))

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s.astype(F32))

    def bwd(g):
        _accum(x, g * out.data * (1.0 - out.data))

    return _record(out, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    d = x.data
    u = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(u)
    out = Tensor((0.5 * d * (1.0 + t)).astype(F32))

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du
        _accum(x, (g * local).astype(F32))

    return _record(out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction."""
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(F32)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(x, (p * (g - dot)).astype(F32))

    return _record(out, (x,), bwd)


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, eps = 1e-6, along the last axis."""
    if x.data.shape[-1] != gain.data.shape[0]:
        raise ShapeError(f"rmsnorm: feature dim {x.data.shape[-1]} vs gain {gain.data.shape}")
    d = x.data
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + RMSNORM_EPS)
    xhat = d * inv
    out = Tensor((xhat * gain.data).astype(F32))

    def bwd(g):
        gg = g * gain.data
        n = d.shape[-1]
        corr = (gg * xhat).sum(axis=-1, keepdims=True) / n
        _accum(x, (inv * (gg - xhat * corr)).astype(F32))
        axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=axes).astype(F32))

    return _record(out, (x, gain), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """x (Ci,h,w), w (Ci,Co,k,k), k == stride -> (Co, h*stride, w*stride)."""
    if w.data.shape[2] != stride or w.data.shape[3] != stride:
        raise ConfigError(
            f"conv_transpose2d: kernel {w.data.shape[2:]} must equal stride {stride}"
        )
    if x.data.ndim != 3 or x.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.data.shape} vs kernel {w.data.shape}")
    out = Tensor(kernels.conv_transpose2d_fwd(x.data, w.data, stride))

    def bwd(g):
        gx, gw = kernels.conv_transpose2d_bwd(x.data, w.data, np.ascontiguousarray(g), stride)
        _accum(x, gx)
        _accum(w, gw)

    return _record(out, (x, w), bwd)


def depthwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """x (C,h,w), w (C,k,k), odd k, zero 'same' padding -> (C,h,w)."""
    if w.data.shape[1] % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel size {w.data.shape[1]} must be odd")
    if x.data.ndim != 3 or x.data.shape[0] != w.data.shape[0] or w.data.shape[1] != w.data.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.data.shape} vs kernel {w.data.shape}")
    out = Tensor(kernels.depthwise_conv2d_fwd(x.data, w.data))

    def bwd(g):
        gx, gw = kernels.depthwise_conv2d_bwd(x.data, w.data, np.ascontiguousarray(g))
        _accum(x, gx)
        _accum(w, gw)

    return _record(out, (x, w), bwd)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """x (C,h,w) -> (C,out_h,out_w); half-pixel centers, edges clamped."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize needs (C,h,w), got {x.data.shape}")
    in_h, in_w = x.data.shape[1], x.data.shape[2]
    out = Tensor(kernels.bilinear_resize_fwd(np.ascontiguousarray(x.data), out_h, out_w))

    def bwd(g):
        _accum(x, kernels.bilinear_resize_bwd(in_h, in_w, np.ascontiguousarray(g)))

    return _record(out, (x,), bwd)


def cross_entropy_rows(logits: Tensor, row_idx, target_ids) -> Tensor:
    """Mean of -log softmax(logits[row])[target] over the given rows; 0 if none.

    The log-sum-exp runs in float64 internally; the result is float32.
    """
    rows = np.asarray(row_idx, dtype=np.intp)
    tgts = np.asarray(target_ids, dtype=np.intp)
    if rows.size == 0:
        return Tensor(np.asarray(0.0, dtype=F32))
    sel = logits.data[rows].astype(np.float64)
    m = sel.max(axis=-1, keepdims=True)
    e = np.exp(sel - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = sel - m - np.log(z)
    loss = -logp[np.arange(rows.size), tgts].mean()
    out = Tensor(np.asarray(loss, dtype=F32))
    probs = (e / z).astype(F32)

    def bwd(g):
        gl = np.zeros_like(logits.data)
        gr = probs.copy()
        gr[np.arange(rows.size), tgts] -= 1.0
        np.add.at(gl, rows, gr * (g / rows.size))
        _accum(logits, gl)

    return _record(out, (logits,), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the numerically stable logit form."""
    if logits.data.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: {logits.data.shape} vs targets {targets.shape}")
    d = logits.data.astype(np.float64)
    z = targets.astype(np.float64)
    loss = (np.maximum(d, 0) - d * z + np.log1p(np.exp(-np.abs(d)))).mean()
    out = Tensor(np.asarray(loss, dtype=F32))
    n = d.size

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-d))
        _accum(logits, ((s - z) * (g / n)).astype(F32))

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update. Params without a gradient are
    skipped entirely; lr gates the decay term as well, so lr=0 is a no-op."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p.data
        p.data -= (lr * update).astype(F32)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup over ceil(warmup_ratio * total_steps) steps, then cosine decay to 0."""
    warmup = int(math.ceil(warmup_ratio * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-2) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    rel = |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-6), elementwise max.
    """
    x.grad = None
    x.requires_grad = True
    with GradTape() as tape:
        y = f(x)
        tape.backward(y)
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    g_fd = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).data)
        flat[i] = orig - step
        lo = float(f(x).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.abs(g_ad) + np.abs(g_fd) + 1e-6
    return float((np.abs(g_ad - g_fd) / denom).max())


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_entries: int,
    rng: np.random.Generator,
    step: float = 1e-2,
) -> float:
    """grad_check against a random subset of entries drawn across all params."""
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        y = f()
        tape.backward(y)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    names = sorted(params)
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_entries, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat_i in sorted(int(i) for i in picks):
        k = int(np.searchsorted(bounds, flat_i, side="right"))
        name = names[k]
        local = flat_i - (0 if k == 0 else int(bounds[k - 1]))
        buf = params[name].data.reshape(-1)
        orig = buf[local]
        buf[local] = orig + step
        hi = float(f().data)
        buf[local] = orig - step
        lo = float(f().data)
        buf[local] = orig
        g_fd = (hi - lo) / (2.0 * step)
        g_ad = float(grads[name].reshape(-1)[local])
        rel = abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-6)
        worst = max(worst, rel)
    return worst
