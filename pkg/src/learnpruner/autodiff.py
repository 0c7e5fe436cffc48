"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape everything runs as a
plain numpy forward pass, which is what inference uses.

    with Tape() as tape:
        loss = cross_entropy(x @ w, targets)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires it."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parts = node.backward(g)
            for t, gt in zip(node.inputs, parts):
                if gt is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                leaves[key] = t
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs: Sequence, fn: Callable) -> Tensor:
    needs = bool(_ACTIVE) and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _ACTIVE[-1].nodes.append(_Node(out, tuple(inputs), fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _record(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, row selection)."""
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.ndim

    def bw(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim))))
        return (out,)

    return _record(np.take(x.data, idx, axis=axis), (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    edges = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, edges, axis=axis)))


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(np.matmul(a.data, b.data), (a, b), bw)


# -- attention kernels ------------------------------------------------------

def softmax_rows(logits, mask=None, scale: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``scale * (logits + mask)``.

    ``mask`` holds 0 / -inf entries; masked outputs are exactly zero.  A row
    with every entry masked raises :class:`DegenerateRowError`.
    """
    logits = _as_tensor(logits)
    if mask is None:
        allowed = np.ones(logits.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if not np.all((mask == 0.0) | (mask == -np.inf)):
            raise ValueError("mask entries must be 0 or -inf")
        allowed = np.broadcast_to(mask == 0.0, logits.shape)
    if not allowed.any(axis=-1).all():
        raise DegenerateRowError("softmax row is fully masked")
    x = logits.data * scale
    g = allowed.astype(np.float64)
    a, u, _ = _kernels.weighted_softmax(x, g, allowed)

    def bw(gout):
        dx, _ = _kernels.weighted_softmax_grad(a, u, gout)
        return (dx * scale,)

    return _record(a, (logits,), bw)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask with -inf strictly above the diagonal."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = -np.inf
    return m


def masked_softmax_pruned(logits, keep, causal: bool = False, scale: float = 1.0) -> Tensor:
    """Attention with pruned columns switched off through an adjacency G.

    ``G[i, j] = 1`` if ``i == j`` else ``keep[j]``; the causal restriction is
    applied first.  ``keep`` may be fractional and carries a gradient, which
    is how the pruning module is trained.  ``keep`` must broadcast to
    ``logits.shape[:-1]`` with the column axis last, e.g. ``(B, 1, n)`` for
    ``(B, H, n, n)`` logits.
    """
    logits, keep = _as_tensor(logits), _as_tensor(keep)
    n = logits.shape[-1]
    if logits.shape[-2] != n:
        raise ShapeError(f"pruned softmax needs square logits, got {logits.shape}")
    if keep.shape[-1] != n:
        raise ShapeError(f"keep length {keep.shape[-1]} does not match logits {logits.shape}")
    lead = logits.shape[:-2]
    try:
        kfull = np.broadcast_to(keep.data, (*lead, n))
    except ValueError:
        raise ShapeError(f"keep {keep.shape} does not broadcast against logits {logits.shape}") from None
    x3 = (logits.data * scale).reshape(-1, n, n)
    a, u, bad = _kernels.pruned_softmax(x3, kfull.reshape(-1, n), causal)
    if bad.any():
        raise DegenerateRowError("pruned softmax produced an empty row")

    def bw(gout):
        dx, dk = _kernels.pruned_softmax_grad(a, u, gout.reshape(a.shape))
        return dx.reshape(logits.shape) * scale, _unbroadcast(dk.reshape(*lead, n), keep.shape)

    a_out = a.reshape(logits.shape)
    return _record(a_out, (logits, keep), bw)


# -- losses / normalization -------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = max(targets.size, 1)

    def bw(g):
        p = e / z
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (g / count),)

    return _record(np.asarray(-picked.sum() / count), (logits,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    r = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd / r

    def bw(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gh = g * gain.data
        d = xd.shape[-1]
        gx = (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d) / r
        return gx, gg

    return _record(xhat * gain.data, (x, gain), bw)


def ste(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"ste shapes differ: {hard.shape} vs {soft.shape}")
    return _record(hard.copy(), (soft,), lambda g: (g,))


# -- gradient checking ------------------------------------------------------

def numeric_grad(f: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``t.data``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return out


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
