"""Deterministic float64 tensor core with reverse-mode autodiff.

Tensors wrap numpy arrays and record, in creation order, the operations
that produced them. ``backward`` replays that record in exact reverse
order to accumulate gradients into leaf tensors. Everything is float64;
the same inputs and seed always produce bit-identical results.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from numba import njit

from .errors import ArgumentError, ContractError, DimensionError, RangeError

_NODE_IDS = itertools.count()

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables operation recording."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """An n-dimensional float64 array, optionally tracked for autodiff.

    ``grad`` is populated on leaf tensors (those not produced by an
    operation) by ``backward`` and accumulates across calls until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents",
                 "_rule", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_NODE_IDS)
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Optional[Callable] = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, astensor(other))

    def __radd__(self, other):
        return add(astensor(other), self)

    def __sub__(self, other):
        return sub(self, astensor(other))

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, astensor(other))

    def __rmul__(self, other):
        return mul(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, astensor(other))


def astensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, recording parents and the backward rule if tracking."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


class TapeEntry(NamedTuple):
    out_id: int
    in_ids: tuple[int, ...]
    backward_rule: Callable


class Tape:
    """The recorded operations reachable from a result, in creation order.

    Node ids increase monotonically as tensors are created, so sorting the
    reachable nodes by id reproduces the order the operations ran in; the
    backward pass walks them strictly in reverse.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self._consumed = False

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    @property
    def entries(self) -> list[TapeEntry]:
        return [
            TapeEntry(t.node_id, tuple(p.node_id for p in t._parents), t._rule)
            for t in self.nodes
            if t._rule is not None
        ]

    def backprop(self, root: Tensor, seed: np.ndarray) -> None:
        if self._consumed:
            raise ContractError("backward already ran on this tape")
        self._consumed = True
        flows: dict[int, np.ndarray] = {root.node_id: seed}
        for t in reversed(self.nodes):
            g = flows.pop(t.node_id, None)
            if g is None:
                continue
            if t._rule is None:
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in flows:
                    flows[parent.node_id] = flows[parent.node_id] + pg
                else:
                    flows[parent.node_id] = pg


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf tensor the scalar loss depends on."""
    if loss.data.shape != ():
        raise ContractError(
            f"backward requires a scalar, got shape {loss.data.shape}"
        )
    if loss._backward_done:
        raise ContractError("backward already ran on this tape")
    loss._backward_done = True
    if not loss.requires_grad:
        return
    Tape.trace(loss).backprop(loss, np.ones((), dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _from_op(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _from_op(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _from_op(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-d ``a`` (M,K) and 2-d ``b`` (K,N)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out = a.data @ b.data
    return _from_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _from_op(a.data.transpose(axes), (a,),
                    lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ArgumentError("concat requires at least one tensor")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ArgumentError(f"concat axis {axis} invalid for {ndim}-d tensors")
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise DimensionError("concat operands must share rank")
        for d in range(ndim):
            if d != axis and t.data.shape[d] != tensors[0].data.shape[d]:
                raise DimensionError(
                    f"concat shapes differ off axis {axis}: "
                    f"{tensors[0].data.shape} vs {t.data.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(out, tuple(tensors), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ArgumentError(f"axis {axis} invalid for shape {a.data.shape}")
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ArgumentError(
            f"slice [{start}:{start + length}] out of bounds for axis {axis} "
            f"of shape {a.data.shape}")
    index = tuple(slice(None) if d != axis else slice(start, start + length)
                  for d in range(a.data.ndim))
    out = a.data[index]

    def rule(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        return (gx,)

    return _from_op(out, (a,), rule)


def _check_axis(a: Tensor, axis) -> None:
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.data.ndim <= ax < a.data.ndim:
            raise ArgumentError(
                f"axis {ax} invalid for shape {a.data.shape}")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(a, axis)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _from_op(out, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(a, axis)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else (
        np.prod([a.data.shape[ax] for ax in
                 (axis if isinstance(axis, tuple) else (axis,))]))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _from_op(out, (a,), rule)


@njit(cache=True)
def _masked_grad(g, y):
    gflat = g.reshape(-1)
    yflat = y.reshape(-1)
    out = np.empty_like(gflat)
    for i in range(gflat.size):
        out[i] = gflat[i] if yflat[i] > 0.0 else 0.0
    return out


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def rule(g):
        return (_masked_grad(np.ascontiguousarray(g), out).reshape(out.shape),)

    return _from_op(out, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    out = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _from_op(out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (a,), rule)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup into an embedding matrix; gradient scatter-adds to rows."""
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.data.shape[0]):
        raise RangeError(
            f"embedding id out of range for table of {weight.data.shape[0]} rows")
    out = weight.data[idx]

    def rule(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _from_op(out, (weight,), rule)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy for logits (B,V) and integer targets (B,)."""
    ld = logits.data
    if ld.ndim != 2:
        raise DimensionError(f"expected (B,V) logits, got {ld.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (ld.shape[0],):
        raise DimensionError(
            f"targets shape {t.shape} does not match batch {ld.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= ld.shape[1]):
        raise RangeError(
            f"target id out of range for {ld.shape[1]} classes")
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    out = lse - ld[np.arange(ld.shape[0]), t]

    def rule(g):
        p = np.exp(ld - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(ld.shape[0]), t] -= 1.0
        return (p * g[:, None],)

    return _from_op(out, (logits,), rule)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-softmax of the target class; logits are 1-d (V,)."""
    if logits.data.ndim != 1:
        raise DimensionError(f"expected (V,) logits, got {logits.data.shape}")
    row = reshape(logits, (1, logits.data.shape[0]))
    per = cross_entropy_rows(row, [int(target)])
    return reshape(per, ())


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean stable BCE between logits and {0,1} targets of the same shape."""
    ld = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != ld.shape:
        raise DimensionError(
            f"targets shape {y.shape} does not match logits {ld.shape}")
    # max(l,0) - l*y + log(1+exp(-|l|)) avoids overflow on both tails
    per = np.maximum(ld, 0.0) - ld * y + np.log1p(np.exp(-np.abs(ld)))
    out = per.mean()

    def rule(g):
        s = np.where(ld >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(ld))),
                     np.exp(-np.abs(ld)) / (1.0 + np.exp(-np.abs(ld))))
        return ((s - y) * (g / ld.size),)

    return _from_op(out, (logits,), rule)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def _as_batched(x: Tensor, what: str):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise DimensionError(f"{what} expects (C,H,W) or (N,C,H,W), got {x.data.shape}")


@njit(cache=True)
def _conv3x3_fwd(xp, kd):
    n, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    co = kd.shape[0]
    out = np.zeros((n, co, h, w))
    for i in range(n):
        for oc in range(co):
            for ic in range(c):
                for dy in range(3):
                    for dx in range(3):
                        kv = kd[oc, ic, dy, dx]
                        for y in range(h):
                            for z in range(w):
                                out[i, oc, y, z] += kv * xp[i, ic, y + dy, z + dx]
    return out


@njit(cache=True)
def _conv3x3_bwd(xp, kd, g):
    n, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    co = kd.shape[0]
    gxp = np.zeros((n, c, hp, wp))
    gk = np.zeros(kd.shape)
    for i in range(n):
        for oc in range(co):
            for ic in range(c):
                for dy in range(3):
                    for dx in range(3):
                        kv = kd[oc, ic, dy, dx]
                        acc = 0.0
                        for y in range(h):
                            for z in range(w):
                                gv = g[i, oc, y, z]
                                acc += gv * xp[i, ic, y + dy, z + dx]
                                gxp[i, ic, y + dy, z + dx] += kv * gv
                        gk[oc, ic, dy, dx] += acc
    return gxp, gk


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Same-padded 3x3 cross-correlation with unit stride.

    ``x`` is (C,H,W) or (N,C,H,W); ``k`` is (C',C,3,3). Output spatial size
    equals the input's. Runs as a fused compiled kernel; summation order is
    fixed, so results are bit-reproducible.
    """
    xd, single = _as_batched(x, "conv2d")
    kd = k.data
    if kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise DimensionError(f"kernel must be (C',C,3,3), got {kd.shape}")
    if xd.shape[1] != kd.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {xd.shape} vs kernel {kd.shape}")
    n, c, h, w = xd.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:h + 1, 1:w + 1] = xd
    out = _conv3x3_fwd(xp, np.ascontiguousarray(kd))

    def rule(g):
        if single:
            g = g[None]
        gxp, gk = _conv3x3_bwd(xp, np.ascontiguousarray(kd),
                               np.ascontiguousarray(g))
        gx = gxp[:, :, 1:h + 1, 1:w + 1]
        return (gx[0] if single else gx, gk)

    return _from_op(out[0] if single else out, (x, k), rule)


@njit(cache=True)
def _avgpool_fwd(xd, ph, pw):
    n, c, h, w = xd.shape
    ho = -(-h // ph)
    wo = -(-w // pw)
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ic in range(c):
            for oy in range(ho):
                y0 = oy * ph
                y1 = min(y0 + ph, h)
                for ox in range(wo):
                    x0 = ox * pw
                    x1 = min(x0 + pw, w)
                    acc = 0.0
                    for y in range(y0, y1):
                        for z in range(x0, x1):
                            acc += xd[i, ic, y, z]
                    out[i, ic, oy, ox] = acc / ((y1 - y0) * (x1 - x0))
    return out


@njit(cache=True)
def _avgpool_bwd(g, ph, pw, h, w):
    n, c, ho, wo = g.shape
    gx = np.empty((n, c, h, w))
    for i in range(n):
        for ic in range(c):
            for y in range(h):
                oy = y // ph
                y0 = oy * ph
                y1 = min(y0 + ph, h)
                for z in range(w):
                    ox = z // pw
                    x0 = ox * pw
                    x1 = min(x0 + pw, w)
                    gx[i, ic, y, z] = g[i, ic, oy, ox] / ((y1 - y0) * (x1 - x0))
    return gx


def avgpool2d(x: Tensor, ph: int, pw: int) -> Tensor:
    """Average pooling; ragged right/bottom windows average their own size."""
    if ph < 1 or pw < 1:
        raise ArgumentError(f"pool sizes must be >= 1, got ({ph},{pw})")
    xd, single = _as_batched(x, "avgpool2d")
    n, c, h, w = xd.shape
    out = _avgpool_fwd(np.ascontiguousarray(xd), ph, pw)

    def rule(g):
        if single:
            g = g[None]
        gx = _avgpool_bwd(np.ascontiguousarray(g), ph, pw, h, w)
        return (gx[0] if single else gx,)

    return _from_op(out[0] if single else out, (x,), rule)


@njit(cache=True)
def _bn_fwd_train(xd, gamma, beta, eps):
    n, c, h, w = xd.shape
    m = n * h * w
    mu = np.zeros(c)
    var = np.zeros(c)
    for i in range(n):
        for ic in range(c):
            s = 0.0
            for y in range(h):
                for z in range(w):
                    s += xd[i, ic, y, z]
            mu[ic] += s
    for ic in range(c):
        mu[ic] /= m
    for i in range(n):
        for ic in range(c):
            s = 0.0
            mv = mu[ic]
            for y in range(h):
                for z in range(w):
                    d = xd[i, ic, y, z] - mv
                    s += d * d
            var[ic] += s
    for ic in range(c):
        var[ic] /= m
    inv = np.empty(c)
    for ic in range(c):
        inv[ic] = 1.0 / np.sqrt(var[ic] + eps)
    out = np.empty_like(xd)
    for i in range(n):
        for ic in range(c):
            gm = gamma[ic] * inv[ic]
            mv = mu[ic]
            bt = beta[ic]
            for y in range(h):
                for z in range(w):
                    out[i, ic, y, z] = gm * (xd[i, ic, y, z] - mv) + bt
    return out, mu, var, inv


@njit(cache=True)
def _bn_bwd_train(xd, g, gamma, mu, inv):
    n, c, h, w = xd.shape
    m = n * h * w
    gbeta = np.zeros(c)
    ggamma = np.zeros(c)
    for i in range(n):
        for ic in range(c):
            sb = 0.0
            sg = 0.0
            mv = mu[ic]
            iv = inv[ic]
            for y in range(h):
                for z in range(w):
                    gv = g[i, ic, y, z]
                    sb += gv
                    sg += gv * (xd[i, ic, y, z] - mv) * iv
            gbeta[ic] += sb
            ggamma[ic] += sg
    gx = np.empty_like(xd)
    for i in range(n):
        for ic in range(c):
            giv = gamma[ic] * inv[ic]
            mv = mu[ic]
            iv = inv[ic]
            b_m = gbeta[ic] / m
            g_m = ggamma[ic] / m
            for y in range(h):
                for z in range(w):
                    xhat = (xd[i, ic, y, z] - mv) * iv
                    gx[i, ic, y, z] = giv * (g[i, ic, y, z] - b_m - xhat * g_m)
    return gx, ggamma, gbeta


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: Tensor, running_var: Tensor,
              training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N,H,W) for (N,C,H,W) input.

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the frozen running statistics.
    """
    xd, single = _as_batched(x, "batchnorm")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batchnorm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels")
    xd = np.ascontiguousarray(xd)
    if training:
        out, mu, var, inv = _bn_fwd_train(xd, gamma.data, beta.data, eps)
        running_mean.data[...] = momentum * running_mean.data + (1 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        out = (gamma.data[None, :, None, None] * xhat
               + beta.data[None, :, None, None])

    def rule(g):
        if single:
            g = g[None]
        g = np.ascontiguousarray(g)
        if training:
            gx, ggamma, gbeta = _bn_bwd_train(xd, g, gamma.data, mu, inv)
        else:
            axes = (0, 2, 3)
            gbeta = g.sum(axis=axes)
            xhat_e = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
            ggamma = (g * xhat_e).sum(axis=axes)
            gx = g * (gamma.data * inv)[None, :, None, None]
        return (gx[0] if single else gx, ggamma, gbeta)

    return _from_op(out[0] if single else out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# recurrent cell and linear helper
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map of the last axis: x (...,I) with w (O,I) -> (...,O)."""
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    out = matmul(flat, transpose(w))
    if b is not None:
        out = add(out, b)
    if x.data.ndim != 2:
        out = reshape(out, lead + (w.data.shape[0],))
    return out


def gru_cell(x: Tensor, h: Tensor, p: dict) -> Tensor:
    """One gated-recurrent-unit update for input x and previous state h.

    ``p`` maps the names w_r,u_r,b_r, w_z,u_z,b_z, w_n,u_n,b_n to tensors
    with shapes (H,I), (H,H) and (H,). The reset gate is applied inside the
    candidate's recurrent term. Inputs may be vectors or (B, dim) batches.
    """
    vec = x.data.ndim == 1
    if vec:
        x = reshape(x, (1, x.data.shape[0]))
        h = reshape(h, (1, h.data.shape[0]))
    r = sigmoid(add(add(linear(x, p["w_r"]), linear(h, p["u_r"])), p["b_r"]))
    z = sigmoid(add(add(linear(x, p["w_z"]), linear(h, p["u_z"])), p["b_z"]))
    cand = tanh(add(linear(x, p["w_n"]), mul(r, add(linear(h, p["u_n"]), p["b_n"]))))
    one = Tensor(1.0)
    out = add(mul(sub(one, z), cand), mul(z, h))
    if vec:
        out = reshape(out, (out.data.shape[1],))
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray


class Adam:
    """Adam with bias-corrected moments over a dict of named parameters.

    Buffers (requires_grad=False) are skipped. A missing gradient is
    treated as zero. Updates mutate parameter data in place.
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {lr}")
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.state = {
            n: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            for n, p in self.params.items()
        }

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st = self.state[name]
            st.m[...] = self.beta1 * st.m + (1.0 - self.beta1) * g
            st.v[...] = self.beta2 * st.v + (1.0 - self.beta2) * g * g
            mhat = st.m / bc1
            vhat = st.v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def zero_grad(params: dict) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def glorot_uniform(shape, fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def buffer(values) -> Tensor:
    """A stateful non-trainable tensor (e.g. batchnorm running statistics)."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=False)
