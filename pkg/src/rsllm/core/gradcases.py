"""Gradient-check cases: one small loss per differentiable primitive."""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Parameter, Tensor


def P(rng, *shape, name="p"):
    return Parameter(rng.normal(size=shape), name=name)


def weighted(out, rng):
    """Random-weighted sum gives O(1) gradients in every output coordinate."""
    w = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return ops.sum(ops.mul(out, w))


def primitive_cases(rng):
    """(name, params, loss-builder) for every primitive kind."""
    cases = []
    a, b = P(rng, 3, 4, name="a"), P(rng, 4, 5, name="b")
    cases.append(("matmul", [a, b], lambda: weighted(ops.matmul(a, b), rng)))
    t = P(rng, 6, 3, name="table")
    ids = rng.integers(0, 6, size=(2, 5))
    cases.append(("embedding", [t], lambda: weighted(ops.embedding(t, ids), rng)))
    c1, c2 = P(rng, 2, 3, 4, name="c1"), P(rng, 2, 2, 4, name="c2")
    cases.append(("concat", [c1, c2], lambda: weighted(ops.concat([c1, c2], axis=-2), rng)))
    x, y = P(rng, 3, 4, name="x"), P(rng, 4, name="y")
    cases.append(("add", [x, y], lambda: weighted(ops.add(x, y), rng)))
    cases.append(("mul", [x, y], lambda: weighted(ops.mul(x, y), rng)))
    cases.append(("div", [x], lambda: weighted(ops.div(x, ops.add(ops.mul(y, y), 1.0)), rng)))
    r = Parameter(rng.normal(size=(5, 6)) + 0.05, name="r")
    r.data[np.abs(r.data) < 1e-2] = 0.5
    cases.append(("relu", [r], lambda: weighted(ops.relu(r), rng)))
    cases.append(("gelu", [x], lambda: weighted(ops.gelu(x), rng)))
    cases.append(("tanh", [x], lambda: weighted(ops.tanh(x), rng)))
    cases.append(("sigmoid", [x], lambda: weighted(ops.sigmoid(x), rng)))
    g, be = P(rng, 4, name="gain"), P(rng, 4, name="shift")
    cases.append(("layer_norm", [x, g, be], lambda: weighted(ops.layer_norm(x, g, be), rng)))
    cases.append(("softmax", [x], lambda: weighted(ops.softmax(x), rng)))
    cases.append(("log_softmax", [x], lambda: weighted(ops.log_softmax(x, axis=0), rng)))
    tg = rng.integers(0, 4, size=3)
    cases.append(("cross_entropy", [x], lambda: ops.cross_entropy(x, tg)))
    h = P(rng, 2, 5, 3, name="h")
    mask = np.array([[0, 1, 1, 0, 0], [1, 0, 0, 0, 1]])
    cases.append(("span_mean", [h], lambda: weighted(ops.span_mean(h, mask), rng)))
    u, v = P(rng, 4, 3, name="u"), P(rng, 4, 3, name="v")
    cases.append(("cosine", [u, v], lambda: weighted(ops.cosine_similarity(u, v), rng)))
    cases.append(("cosine_matrix", [u, v], lambda: weighted(ops.cosine_matrix(u, v), rng)))
    xs = P(rng, 2, 5, 4, name="xs")
    ws = [P(rng, 4, 4, name=f"w{i}") for i in range(4)]
    m = ops.causal_mask(5, valid=np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]]))
    cases.append(("attention", [xs, *ws],
                  lambda: weighted(ops.causal_self_attention(xs, *ws, n_heads=2, mask=m), rng)))
    gx, gh = P(rng, 3, 4, name="gx"), P(rng, 3, 5, name="gh")
    wi, wh = P(rng, 4, 15, name="wi"), P(rng, 5, 15, name="wh")
    wi.data *= 0.3
    wh.data *= 0.3
    bi, bh = P(rng, 15, name="bi"), P(rng, 15, name="bh")
    cases.append(("gru_cell", [gx, gh, wi, wh, bi, bh],
                  lambda: weighted(ops.gru_cell(gx, gh, wi, wh, bi, bh), rng)))
    img = P(rng, 2, 5, 4, name="img")
    hf, vf, hb = P(rng, 3, 2, 4, name="hf"), P(rng, 2, 5, 1, name="vf"), P(rng, 3, name="hb")
    cases.append(("conv2d_horizontal", [img, hf, hb], lambda: weighted(ops.conv2d(img, hf, hb), rng)))
    cases.append(("conv2d_vertical", [img, vf], lambda: weighted(ops.conv2d(img, vf), rng)))
    k2 = P(rng, 2, 2, 3, name="k")
    cases.append(("conv2d_2d", [img, k2], lambda: weighted(ops.conv2d(img, k2), rng)))
    mx = Parameter(rng.permutation(12).reshape(3, 4).astype(float), name="mx")
    cases.append(("max", [mx], lambda: weighted(ops.max(mx, axis=1), rng)))
    cases.append(("getitem", [x], lambda: weighted(x[np.array([0, 2, 2]), 1:], rng)))
    cases.append(("transpose_reshape", [xs], lambda: weighted(ops.reshape(ops.transpose(xs, (1, 0, 2)), (5, 8)), rng)))
    cases.append(("exp_log", [g], lambda: weighted(ops.log(ops.add(ops.exp(g), 1.0)), rng)))
    return cases
