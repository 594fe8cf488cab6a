"""Minimal reverse-mode autodiff on 64-bit numpy arrays.

A Tensor wraps an ndarray plus an optional gradient. Every op records a
closure that knows how to push gradients to its parents; backward() on a
scalar walks the recorded graph once, in reverse topological order, and
accumulates into .grad of every tensor that asked for it.

Shapes are checked eagerly and there is no implicit broadcasting between
tensors. The only silent rank bending allowed anywhere is tensor-scalar
arithmetic; everything else goes through reshape / broadcast_to so the
graph says exactly what it does.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    EmptyList,
    GraphConsumed,
    IndivisibleSpatialExtent,
    NotScalar,
    ShapeMismatch,
)

_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops executed inside record no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "_parents",
        "_backward",
        "_consumed",
        "_grad_owned",
    )

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        # First contribution keeps a reference: closures hand over fresh
        # arrays (or views of them) that no other node mutates.  Only a
        # second path forces an allocation, after which += is safe.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Reverse pass from a scalar. One shot per graph: rebuild to rerun."""
        if self.data.size != 1:
            raise NotScalar(f"backward() needs a scalar, got shape {self.data.shape}")
        if self._consumed:
            raise GraphConsumed("backward() already ran on this graph")
        self._consumed = True

        # Iterative postorder: recursion depth would blow up on deep graphs.
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            # Drop closure refs so the graph frees as soon as we pass it.
            node._backward = None
            node._parents = ()

    # Arithmetic sugar; the real work lives in the module functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(data, parents, backward):
    """Build an op output; records the closure only under an active tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._grad_owned = False
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def constant(data) -> Tensor:
    """Non-grad leaf that adopts the array without copying.

    Only hand it arrays nothing else will mutate; Tensor(...) is the
    safe, copying constructor for everything user-facing.
    """
    return _wrap(_as_f64(data), (), None)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b):
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"add {a.data.shape} vs {b.data.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return _wrap(a.data + b.data, (a, b), bwd)

    s = float(b)

    def bwd_s(g):
        a._accumulate(g)

    return _wrap(a.data + s, (a,), bwd_s)


def mul(a: Tensor, b):
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"mul {a.data.shape} vs {b.data.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return _wrap(a.data * b.data, (a, b), bwd)

    s = float(b)

    def bwd_s(g):
        a._accumulate(g * s)

    return _wrap(a.data * s, (a,), bwd_s)


def div(a: Tensor, b):
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape and b.data.size != 1:
            raise ShapeMismatch(f"div {a.data.shape} vs {b.data.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g / b.data)
            if b.requires_grad:
                gb = -g * a.data / (b.data * b.data)
                if b.data.shape != a.data.shape:  # scalar denominator
                    gb = np.sum(gb).reshape(b.data.shape)
                b._accumulate(gb)

        return _wrap(a.data / b.data, (a, b), bwd)

    return mul(a, 1.0 / float(b))


def relu(x: Tensor):
    mask = x.data > 0

    def bwd(g):
        x._accumulate(g * mask)

    return _wrap(np.where(mask, x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor):
    # Piecewise form never exponentiates a large positive number.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        x._accumulate(g * out * (1.0 - out))

    return _wrap(out, (x,), bwd)


def sqrt(x: Tensor):
    out = np.sqrt(x.data)

    def bwd(g):
        x._accumulate(g * 0.5 / out)

    return _wrap(out, (x,), bwd)


def absolute(x: Tensor):
    sign = np.sign(x.data)

    def bwd(g):
        x._accumulate(g * sign)

    return _wrap(np.abs(x.data), (x,), bwd)


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size and -1 not in shape:
        raise ShapeMismatch(f"reshape {x.data.shape} -> {shape}")
    old = x.data.shape

    def bwd(g):
        x._accumulate(g.reshape(old))

    return _wrap(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeMismatch(f"transpose axes {axes} for rank {x.data.ndim}")
    inv = tuple(np.argsort(axes))

    def bwd(g):
        x._accumulate(np.transpose(g, inv))

    return _wrap(np.transpose(x.data, axes), (x,), bwd)


def concat(xs, axis: int = 0):
    xs = list(xs)
    if not xs:
        raise EmptyList("concat of zero tensors")
    ref = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
            i != axis and s[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch(f"concat {s} vs {ref} on axis {axis}")
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _wrap(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bwd)


def broadcast_to(x: Tensor, shape):
    """Explicit broadcast; backward sums over the expanded axes."""
    shape = tuple(int(s) for s in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError as e:
        raise ShapeMismatch(f"broadcast {x.data.shape} -> {shape}") from e
    pad = len(shape) - x.data.ndim
    axes = tuple(
        i
        for i in range(len(shape))
        if i < pad or x.data.shape[i - pad] != shape[i]
    )
    old = x.data.shape

    def bwd(g):
        x._accumulate(np.sum(g, axis=axes).reshape(old) if axes else g)

    return _wrap(out, (x,), bwd)


def index_select(x: Tensor, idx, axis: int = 0):
    """Gather rows along axis 0 by integer index; indices carry no grad."""
    if axis != 0:
        raise ShapeMismatch("index_select supports axis 0 only")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch(f"index array must be 1-D, got {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeMismatch(f"index out of range for axis of extent {n}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return _wrap(x.data[idx], (x,), bwd)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False):
    axes = _norm_axes(axis, x.data.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        gg = g
        if not keepdims and axes is not None:
            expand = list(shape)
            for a in axes:
                expand[a] = 1
            gg = g.reshape(expand)
        # Read-only broadcast view is fine: grads are never mutated in place
        # unless this node owns them, and a view is never owned.
        x._accumulate(np.broadcast_to(gg, shape) if gg.shape != shape else gg)

    return _wrap(np.asarray(out), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False):
    axes = _norm_axes(axis, x.data.ndim)
    if axes is None:
        count = x.data.size
    else:
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return mul(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def gap(x: Tensor, spatial_ndim: int):
    """Global average pool: mean over the spatial_ndim axes before channels."""
    nd = x.data.ndim
    if spatial_ndim >= nd:
        raise ShapeMismatch(f"gap over {spatial_ndim} axes of rank-{nd} tensor")
    axes = tuple(range(nd - 1 - spatial_ndim, nd - 1))
    return tmean(x, axis=axes)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------- nonlinear


def softmax(x: Tensor, axis: int = -1):
    ax = axis % x.data.ndim
    e = x.data - np.max(x.data, axis=ax, keepdims=True)
    np.exp(e, out=e)
    e /= np.sum(e, axis=ax, keepdims=True)
    out = e

    def bwd(g):
        dot = np.sum(g * out, axis=ax, keepdims=True)
        gx = g - dot
        gx *= out
        x._accumulate(gx)

    return _wrap(out, (x,), bwd)


def cross_entropy(logits: Tensor, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy wants (N, K) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeMismatch("label id out of range")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    ll = shifted[np.arange(n), labels] - logz
    out = np.asarray(-np.mean(ll))

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate((float(g) / n) * p)

    return _wrap(out, (logits,), bwd)


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor):
    """2-D matrix product, or stacked product when both carry identical
    leading axes. A 2-D right operand against an N-D left one is allowed
    (shared weight applied across the stack); nothing else broadcasts."""
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims {da.shape} @ {db.shape}")
    if db.ndim > 2 and da.shape[:-2] != db.shape[:-2]:
        raise ShapeMismatch(f"matmul leading dims {da.shape} @ {db.shape}")

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(db, -1, -2))
            if ga.shape != da.shape:  # rank-2 rhs applied across a stack
                ga = ga.reshape(da.shape)
            a._accumulate(ga)
        if b.requires_grad:
            if db.ndim == 2 and da.ndim > 2:
                gb = np.tensordot(
                    da, g, axes=(tuple(range(da.ndim - 1)), tuple(range(g.ndim - 1)))
                )
            else:
                gb = np.matmul(np.swapaxes(da, -1, -2), g)
            b._accumulate(gb)

    return _wrap(np.matmul(da, db), (a, b), bwd)


# ---------------------------------------------------------------- convolution


def conv1d(x: Tensor, k: Tensor):
    """3-tap conv along the second-to-last axis, zero padding 1, stride 1.

    x: (..., L, Cin), k: (3, Cin, Cout) -> (..., L, Cout)
    """
    if k.data.ndim != 3 or k.data.shape[0] != 3:
        raise ShapeMismatch(f"conv1d kernel must be (3, Cin, Cout), got {k.data.shape}")
    if x.data.ndim < 2 or x.data.shape[-1] != k.data.shape[1]:
        raise ShapeMismatch(f"conv1d input {x.data.shape} vs kernel {k.data.shape}")
    L = x.data.shape[-2]
    pad = [(0, 0)] * x.data.ndim
    pad[-2] = (1, 1)
    xp = np.pad(x.data, pad)
    out = None
    for d in range(3):
        term = np.matmul(xp[..., d : d + L, :], k.data[d])
        out = term if out is None else out + term

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for d in range(3):
                gxp[..., d : d + L, :] += np.matmul(g, k.data[d].T)
            x._accumulate(gxp[..., 1 : L + 1, :])
        if k.requires_grad:
            gk = np.empty_like(k.data)
            lead = tuple(range(x.data.ndim - 1))
            for d in range(3):
                gk[d] = np.tensordot(xp[..., d : d + L, :], g, axes=(lead, lead))
            k._accumulate(gk)

    return _wrap(out, (x, k), bwd)


def conv2d(x: Tensor, k: Tensor):
    """Stride-1 2-D conv over channels-last maps.

    x: (..., H, W, Cin); k: (1, 1, Cin, Cout) with no padding, or
    (3, 3, Cin, Cout) with zero padding 1. Spatial extent is preserved.
    """
    ks = k.data.shape
    if len(ks) != 4 or (ks[0], ks[1]) not in ((1, 1), (3, 3)):
        raise ShapeMismatch(f"conv2d kernel must be 1x1 or 3x3, got {ks}")
    if x.data.ndim < 3 or x.data.shape[-1] != ks[2]:
        raise ShapeMismatch(f"conv2d input {x.data.shape} vs kernel {ks}")
    if ks[0] == 1:
        return _conv2d_1x1(x, k)
    H, W = x.data.shape[-3], x.data.shape[-2]
    pad = [(0, 0)] * x.data.ndim
    pad[-3] = pad[-2] = (1, 1)
    xp = np.pad(x.data, pad)
    out = None
    for dh in range(3):
        for dw in range(3):
            term = np.matmul(xp[..., dh : dh + H, dw : dw + W, :], k.data[dh, dw])
            out = term if out is None else out + term

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dh in range(3):
                for dw in range(3):
                    gxp[..., dh : dh + H, dw : dw + W, :] += np.matmul(
                        g, k.data[dh, dw].T
                    )
            x._accumulate(gxp[..., 1 : H + 1, 1 : W + 1, :])
        if k.requires_grad:
            gk = np.empty_like(k.data)
            lead = tuple(range(x.data.ndim - 1))
            for dh in range(3):
                for dw in range(3):
                    gk[dh, dw] = np.tensordot(
                        xp[..., dh : dh + H, dw : dw + W, :], g, axes=(lead, lead)
                    )
            k._accumulate(gk)

    return _wrap(out, (x, k), bwd)


def _conv2d_1x1(x: Tensor, k: Tensor):
    w = k.data[0, 0]

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.T))
        if k.requires_grad:
            lead = tuple(range(x.data.ndim - 1))
            gk = np.tensordot(x.data, g, axes=(lead, lead))
            k._accumulate(gk.reshape(k.data.shape))

    return _wrap(np.matmul(x.data, w), (x, k), bwd)


def conv3d(x: Tensor, k: Tensor):
    """3x3x3 conv, zero padding 1, stride 1, channels last.

    x: (..., T, H, W, Cin), k: (3, 3, 3, Cin, Cout).
    """
    ks = k.data.shape
    if len(ks) != 5 or ks[:3] != (3, 3, 3):
        raise ShapeMismatch(f"conv3d kernel must be (3,3,3,Cin,Cout), got {ks}")
    if x.data.ndim < 4 or x.data.shape[-1] != ks[3]:
        raise ShapeMismatch(f"conv3d input {x.data.shape} vs kernel {ks}")
    T, H, W = x.data.shape[-4:-1]
    pad = [(0, 0)] * x.data.ndim
    pad[-4] = pad[-3] = pad[-2] = (1, 1)
    xp = np.pad(x.data, pad)
    out = None
    for dt in range(3):
        for dh in range(3):
            for dw in range(3):
                sl = xp[..., dt : dt + T, dh : dh + H, dw : dw + W, :]
                term = np.matmul(sl, k.data[dt, dh, dw])
                out = term if out is None else out + term

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dt in range(3):
                for dh in range(3):
                    for dw in range(3):
                        gxp[..., dt : dt + T, dh : dh + H, dw : dw + W, :] += np.matmul(
                            g, k.data[dt, dh, dw].T
                        )
            x._accumulate(gxp[..., 1 : T + 1, 1 : H + 1, 1 : W + 1, :])
        if k.requires_grad:
            gk = np.empty_like(k.data)
            lead = tuple(range(x.data.ndim - 1))
            for dt in range(3):
                for dh in range(3):
                    for dw in range(3):
                        sl = xp[..., dt : dt + T, dh : dh + H, dw : dw + W, :]
                        gk[dt, dh, dw] = np.tensordot(sl, g, axes=(lead, lead))
            k._accumulate(gk)

    return _wrap(out, (x, k), bwd)


def avg_pool2d(x: Tensor, window):
    """Non-overlapping average pooling over (..., H, W, C)."""
    ph, pw = int(window[0]), int(window[1])
    if x.data.ndim < 3:
        raise ShapeMismatch(f"avg_pool2d wants (..., H, W, C), got {x.data.shape}")
    H, W = x.data.shape[-3], x.data.shape[-2]
    if ph < 1 or pw < 1 or H % ph or W % pw:
        raise IndivisibleSpatialExtent(f"window {(ph, pw)} on {H}x{W}")
    lead = x.data.shape[:-3]
    C = x.data.shape[-1]
    split = x.data.reshape(lead + (H // ph, ph, W // pw, pw, C))
    out = split.mean(axis=(-4, -2))
    inv = 1.0 / (ph * pw)

    def bwd(g):
        gg = g.reshape(lead + (H // ph, 1, W // pw, 1, C)) * inv
        gx = np.broadcast_to(gg, lead + (H // ph, ph, W // pw, pw, C))
        x._accumulate(gx.reshape(x.data.shape))

    return _wrap(out, (x,), bwd)


# ---------------------------------------------------------------- grad check


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map x to a scalar Tensor and be deterministic. Error is
    |analytic - numeric| / max(1, |numeric|), maximised over elements.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.array(x.grad, dtype=np.float64)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(x).data)
            flat[i] = orig - h
            lo = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
