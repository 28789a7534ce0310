"""Differentiable primitives.

Each function computes its forward value with numpy and registers a closure
mapping the output gradient to one gradient per input. Shape problems raise
:class:`ContractError` naming the op and the offending dimensions.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import ContractError, Tensor, as_tensor, make_node

_NEG_INF = -np.inf


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU with its exact derivative."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * (u * u * u))
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), bw, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity unless ``train`` is set and ``p > 0``."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: train mode requires an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_node(out, (x,), bw, "max")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 0:
        axes = None
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_node(np.array(out, copy=True), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (axis 0 for tables, -2 for token sequences)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: no inputs")
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ContractError(f"concat: shape {t.shape} incompatible with {tuple(ref)} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return make_node(out, tensors, bw, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold the leading axes into one product instead of a batched one plus a sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ContractError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: id out of range for table with {table.shape[0]} rows")
    flat = ids.reshape(-1)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_node(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- normalisation / softmax

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"layer_norm: gain/bias must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[..., V]`` against integer ``targets[...]``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"cross_entropy: target out of range for {V} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = targets.size or 1
    if reduction == "mean":
        value, scale = -picked.sum() / n, 1.0 / n
    elif reduction == "sum":
        value, scale = -picked.sum(), 1.0
    else:
        raise ContractError(f"cross_entropy: unknown reduction {reduction!r}")

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (g * scale),)

    return make_node(np.asarray(value), (logits,), bw, "cross_entropy")


def span_mean(x: Tensor, mask) -> Tensor:
    """Mean over the token positions selected by ``mask``.

    ``x`` is ``[..., T, d]`` and ``mask`` a 0/1 array ``[..., T]``; every row of the
    mask must select at least one position.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise ContractError(f"span_mean: mask {m.shape} does not match positions {x.shape[:-1]}")
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ContractError("span_mean: empty span")
    w = (m / count)[..., None]
    return make_node((x.data * w).sum(axis=-2), (x,),
                     lambda g: (np.expand_dims(g, -2) * w,), "span_mean")


def normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ContractError("normalize: zero-norm vector (cosine undefined)")
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (x,), bw, "normalize")


def cosine_similarity(a, b) -> Tensor:
    """Cosine between matching rows of ``a`` and ``b`` (broadcast over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"cosine_similarity: vector sizes differ ({a.shape[-1]} vs {b.shape[-1]})")
    return sum(mul(normalize(a), normalize(b)), axis=-1)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine: ``out[i, j] = cos(a[i], b[j])``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"cosine_matrix: expected [N,d] and [M,d], got {a.shape} and {b.shape}")
    return matmul(normalize(a), transpose(normalize(b)))


# ---------------------------------------------------------------- sequence blocks

def attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """Scaled dot-product attention, ``q,k,v`` shaped ``[B, H, T, dh]``.

    ``mask`` is boolean, broadcastable to ``[B, H, T, T]``; True marks allowed
    (query, key) pairs. Every query row must allow at least one key.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 4:
        raise ContractError(f"attention: q/k/v shapes {q.shape}/{k.shape}/{v.shape} must match as [B,H,T,dh]")
    mask = np.asarray(mask, dtype=bool)
    T = q.shape[2]
    try:
        mask = np.broadcast_to(mask, q.shape[:2] + (T, T))
    except ValueError:
        raise ContractError(f"attention: mask {mask.shape} not broadcastable to {q.shape[:2] + (T, T)}") from None
    if not mask.any(axis=-1).all():
        raise ContractError("attention: a query row has no allowed keys")
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    s = np.where(mask, s, _NEG_INF)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k.data if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv

    return make_node(out, (q, k, v), bw, "attention")


def causal_mask(T: int, valid=None) -> np.ndarray:
    """Boolean ``[B or 1, 1, T, T]`` mask: key j visible from query i iff j <= i and j valid."""
    m = np.tril(np.ones((T, T), dtype=bool))[None, None]
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        m = m & valid[:, None, None, :]
    return m


def causal_self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                          n_heads: int, mask) -> Tensor:
    """Multi-head self-attention over ``x[B, T, d]`` with an explicit mask."""
    if x.ndim != 3:
        raise ContractError(f"causal_self_attention: expected [B,T,d], got {x.shape}")
    B, T, d = x.shape
    if d % n_heads:
        raise ContractError(f"causal_self_attention: d={d} not divisible by {n_heads} heads")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (d, d):
            raise ContractError(f"causal_self_attention: {name} must be ({d},{d}), got {w.shape}")
    dh = d // n_heads

    def heads(t):
        return transpose(reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(matmul(x, wq)), heads(matmul(x, wk)), heads(matmul(x, wv))
    o = attention(q, k, v, mask)
    o = reshape(transpose(o, (0, 2, 1, 3)), (B, T, d))
    return matmul(o, wo)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step (reset gate applied after the hidden matmul, as in cuDNN/PyTorch)."""
    H = h.shape[-1]
    if w_ih.shape != (x.shape[-1], 3 * H) or w_hh.shape != (H, 3 * H):
        raise ContractError(f"gru_cell: weights {w_ih.shape}/{w_hh.shape} do not fit input {x.shape[-1]}, hidden {H}")
    gi = add(matmul(x, w_ih), b_ih)
    gh = add(matmul(h, w_hh), b_hh)
    r = sigmoid(add(gi[..., :H], gh[..., :H]))
    z = sigmoid(add(gi[..., H:2 * H], gh[..., H:2 * H]))
    n = tanh(add(gi[..., 2 * H:], mul(r, gh[..., 2 * H:])))
    return add(mul(sub(1.0, z), n), mul(z, h))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Single-input-channel valid convolution (cross-correlation).

    ``x`` is ``[B, H, W]``, ``w`` is ``[F, kh, kw]``; returns ``[B, F, H-kh+1, W-kw+1]``.
    Caser's horizontal filters use ``kw = W``; its vertical filters use ``kh = H, kw = 1``.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ContractError(f"conv2d: expected x [B,H,W] and w [F,kh,kw], got {x.shape} and {w.shape}")
    F, kh, kw = w.shape
    Bn, Hh, Ww = x.shape
    if kh > Hh or kw > Ww:
        raise ContractError(f"conv2d: kernel ({kh},{kw}) larger than input ({Hh},{Ww})")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))  # [B,Ho,Wo,kh,kw]
    out = np.einsum("bijkl,fkl->bfij", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    Ho, Wo = Hh - kh + 1, Ww - kw + 1

    def bw(g):
        gw = np.einsum("bfij,bijkl->fkl", g, win, optimize=True)
        gwin = np.einsum("bfij,fkl->bijkl", g, w.data, optimize=True)
        gx = np.zeros_like(x.data)
        for a in range(kh):
            if Wo == 1:
                gx[:, a:a + Ho, :kw] += gwin[:, :, 0, a, :]
            else:
                for c in range(kw):
                    gx[:, a:a + Ho, c:c + Wo] += gwin[:, :, :, a, c]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv2d")
