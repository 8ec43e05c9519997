"""Differentiable kernels.  Each builds a node whose backward rule is exact."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BatchTooSmallError, ShapeError
from .graph import Node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def affine(x: Node, W: Node, b: Node | None = None) -> Node:
    """``x @ W.T + b`` for ``x`` of shape (N, n) and ``W`` of shape (m, n)."""
    xv, Wv = x.value, W.value
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[1]:
        raise ShapeError(f"affine: input {xv.shape} vs weight {Wv.shape}")
    out = xv @ Wv.T
    if b is not None:
        if b.value.shape != (Wv.shape[0],):
            raise ShapeError(f"affine: bias {b.value.shape} vs weight {Wv.shape}")
        out = out + b.value

    def backward(g, needs):
        gx = g @ Wv if needs[0] else None
        gW = g.T @ xv if needs[1] else None
        grads = [gx, gW]
        if b is not None:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return grads

    parents = (x, W) if b is None else (x, W, b)
    return x.graph.op("affine", out, parents, backward)


def _windows(xv, w, stride):
    # (B, C, T) -> (B, T_out, C, w)
    B, C, T = xv.shape
    if w == stride and T % w == 0:
        return xv.reshape(B, C, T // w, w).transpose(0, 2, 1, 3)
    win = sliding_window_view(xv, w, axis=2)[:, :, ::stride, :]
    return win.transpose(0, 2, 1, 3)


def temporal_conv(x: Node, K: Node, b: Node | None, stride: int) -> Node:
    """Valid (unpadded) strided 1D cross-correlation over (batch, channels, time)."""
    xv, Kv = x.value, K.value
    if xv.ndim != 3 or Kv.ndim != 3 or xv.shape[1] != Kv.shape[1]:
        raise ShapeError(f"temporal_conv: input {xv.shape} vs kernel {Kv.shape}")
    B, C, T = xv.shape
    Co, _, w = Kv.shape
    if T < w:
        raise ShapeError(f"temporal_conv: sequence length {T} shorter than kernel width {w}")
    T_out = (T - w) // stride + 1
    cols = _windows(xv, w, stride)[:, :T_out].reshape(B * T_out, C * w)
    Kmat = Kv.reshape(Co, C * w)
    out = cols @ Kmat.T
    if b is not None:
        out = out + b.value
    out = out.reshape(B, T_out, Co).transpose(0, 2, 1)

    def backward(g, needs):
        g2 = g.transpose(0, 2, 1).reshape(B * T_out, Co)
        grads = [None, None]
        if needs[0]:
            gcols = (g2 @ Kmat).reshape(B, T_out, C, w)
            if w == stride and T == T_out * w:
                gx = gcols.transpose(0, 2, 1, 3).reshape(B, C, T)
            else:
                gx = np.zeros((B, C, T))
                for k in range(w):
                    gx[:, :, k:k + stride * (T_out - 1) + 1:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            grads[0] = gx
        if needs[1]:
            grads[1] = (g2.T @ cols).reshape(Co, C, w)
        if b is not None:
            grads.append(g2.sum(axis=0) if needs[2] else None)
        return grads

    parents = (x, K) if b is None else (x, K, b)
    return x.graph.op("temporal_conv", out, parents, backward, stride=stride, width=w)


def batch_norm(x: Node, gamma: Node, beta: Node, running_mean, running_var, train: bool,
               update_stats: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
    """Per-channel normalization of (N, C) or (B, C, T) inputs.

    ``running_mean``/``running_var`` are arrays updated in place in train mode.
    """
    xv = x.value
    axes = (0,) if xv.ndim == 2 else (0, 2)
    shape = (1, -1) if xv.ndim == 2 else (1, -1, 1)
    n = xv.size // xv.shape[1]
    if train:
        if xv.shape[0] < 2:
            raise BatchTooSmallError("batch norm in train mode needs a batch of at least 2")
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * n / max(n - 1, 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean.reshape(shape)) * inv_std.reshape(shape)
    gv = gamma.value.reshape(shape)
    out = gv * xhat + beta.value.reshape(shape)

    def backward(g, needs):
        ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
        gbeta = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * gv
            if train:
                s1 = gxhat.sum(axis=axes).reshape(shape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(shape)
                gx = inv_std.reshape(shape) / n * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return x.graph.op("batch_norm", out, (x, gamma, beta), backward, train=train)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph.op("relu", x.value * mask, (x,), lambda g, needs: (g * mask,))


def dropout(x: Node, p: float, train: bool, rng: np.random.Generator | None) -> Node:
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not train or p == 0.0:
        return x
    mask = (rng.random(x.value.shape, dtype=np.float32) >= p) / (1.0 - p)
    return x.graph.op("dropout", x.value * mask, (x,), lambda g, needs: (g * mask,), p=p)


def attention_softmax(logits: Node, gamma: float, axis: int = -2) -> Node:
    """Softmax of ``gamma * logits`` over the frame axis (independently per bone)."""
    z = gamma * logits.value
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        return (gamma * w * (g - (g * w).sum(axis=axis, keepdims=True)),)

    return logits.graph.op("attention_softmax", w, (logits,), backward, gamma=gamma)


# ----------------------------------------------------------------- plumbing

def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: {a.value.shape} vs {b.value.shape}")
    return a.graph.op("add", a.value + b.value, (a, b), lambda g, needs: (g, g))


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: {a.value.shape} vs {b.value.shape}")
    return a.graph.op("sub", a.value - b.value, (a, b), lambda g, needs: (g, -g))


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return a.graph.op("mul", av * bv, (a, b), lambda g, needs: (g * bv, g * av))


def scale(x: Node, c: float) -> Node:
    return x.graph.op("scale", c * x.value, (x,), lambda g, needs: (c * g,), c=c)


def concat(nodes: list[Node], axis: int) -> Node:
    sizes = [n.value.shape[axis] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g, needs):
        idx = [slice(None)] * g.ndim
        grads = []
        for i in range(len(nodes)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(idx)])
        return grads

    return nodes[0].graph.op("concat", out, nodes, backward, axis=axis)


def take(x: Node, index, axis: int) -> Node:
    """Slice/gather along ``axis`` with a slice or integer array (duplicates allowed)."""
    xv = x.value
    idx = [slice(None)] * xv.ndim
    idx[axis] = index
    idx = tuple(idx)
    out = xv[idx]

    def backward(g, needs):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return x.graph.op("take", out, (x,), backward, axis=axis)


def gather_rows(x: Node, rows: np.ndarray) -> Node:
    """``x[arange(B), rows]`` for x of shape (B, l, ...)."""
    xv = x.value
    ar = np.arange(xv.shape[0])
    out = xv[ar, rows]

    def backward(g, needs):
        gx = np.zeros_like(xv)
        np.add.at(gx, (ar, rows), g)
        return (gx,)

    return x.graph.op("gather_rows", out, (x,), backward)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return x.graph.op("reshape", x.value.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return x.graph.op("transpose", x.value.transpose(axes), (x,), lambda g, needs: (g.transpose(inv),))


def repeat_time(x: Node, times: int) -> Node:
    """(B, C) -> (B, C, times) by duplicating along a new trailing time axis."""
    out = np.repeat(x.value[:, :, None], times, axis=2)
    return x.graph.op("repeat_time", out, (x,), lambda g, needs: (g.sum(axis=2),), times=times)


def matmul_const(x: Node, M: np.ndarray) -> Node:
    """``M @ x`` over the second-to-last axis of x, for a constant matrix M."""
    out = np.einsum("kb,...bc->...kc", M, x.value)
    return x.graph.op("matmul_const", out, (x,), lambda g, needs: (np.einsum("kb,...kc->...bc", M, g),))


def mul_const(x: Node, c: np.ndarray) -> Node:
    c = np.asarray(c, dtype=np.float64)
    return x.graph.op("mul_const", x.value * c, (x,), lambda g, needs: (_unbroadcast(g * c, x.value.shape),))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def norm(x: Node, axis: int = -1, eps: float = 0.0) -> Node:
    """Euclidean norm along ``axis``; ``eps`` guards the gradient at zero."""
    n = np.sqrt((x.value ** 2).sum(axis=axis))

    def backward(g, needs):
        denom = np.maximum(n, eps) if eps > 0 else n
        safe = np.where(denom > 0, denom, 1.0)
        return (np.expand_dims(np.where(denom > 0, g / safe, 0.0), axis) * x.value,)

    return x.graph.op("norm", n, (x,), backward)


def normalize(x: Node, axis: int = -1, eps: float = 1e-12) -> Node:
    """Unit vectors along ``axis``."""
    xv = x.value
    n = np.maximum(np.sqrt((xv ** 2).sum(axis=axis, keepdims=True)), eps)
    u = xv / n

    def backward(g, needs):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / n,)

    return x.graph.op("normalize", u, (x,), backward)


def square_sum(x: Node, axis=None) -> Node:
    xv = x.value
    out = np.asarray((xv ** 2).sum(axis=axis))

    def backward(g, needs):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (2.0 * xv * gg,)

    return x.graph.op("square_sum", out, (x,), backward)


def sum_all(x: Node, axis=None) -> Node:
    xv = x.value
    out = np.asarray(xv.sum(axis=axis))

    def backward(g, needs):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xv.shape).copy(),)

    return x.graph.op("sum", out, (x,), backward)


def mean_all(x: Node) -> Node:
    size = x.value.size
    return x.graph.op(
        "mean", np.asarray(x.value.mean()), (x,),
        lambda g, needs: (np.full(x.value.shape, float(g) / size),),
    )


def add_scalars(terms: list[tuple[float, Node]]) -> Node:
    """Weighted sum of scalar nodes: sum(c_i * node_i)."""
    nodes = [n for _, n in terms]
    coefs = [c for c, _ in terms]
    out = np.asarray(sum(c * float(n.value) for c, n in terms))
    return nodes[0].graph.op(
        "weighted_sum", out, nodes,
        lambda g, needs: [np.full(n.value.shape, c * float(g)) for c, n in zip(coefs, nodes)],
    )
