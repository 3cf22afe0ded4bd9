"""Reverse-mode differentiation over the fixed operator set of the networks.

Every operator accepts plain arrays or :class:`Node` objects.  When no input is
a node the operator returns a plain array, so the same expression code serves
both the numeric solvers and the differentiable unrolled networks, and the two
paths execute identical floating-point operations.

Gradient convention: for a real scalar loss ``L`` and a complex variable
``z``, the stored gradient is ``dL/dRe(z) + i dL/dIm(z)``.  Real variables
receive real gradients.  With this convention the backward map of a
complex-linear operator ``A`` is ``A^H``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import conv as _cv
from .errors import DimensionMismatchError


class Node:
    """A value on the tape together with the recipe for its cotangent."""

    __slots__ = ("value", "parents", "backward", "name")

    def __init__(self, value, parents: tuple = (), backward: Callable | None = None, name: str | None = None):
        self.value = np.asarray(value)
        self.parents = parents
        self.backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, dtype={self.value.dtype})"

    # Arithmetic sugar keeps the network code readable.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


def leaf(value, name: str | None = None) -> Node:
    """Create an input node."""
    return Node(np.array(value, copy=True), (), None, name)


def value(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def _any_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _make(out, inputs: Sequence, backward: Callable):
    """Wrap ``out`` in a node if any input is a node.

    ``backward(g)`` returns one cotangent per input (``None`` for inputs that
    need none).
    """
    if not _any_node(*inputs):
        return out
    return Node(out, tuple(inputs), backward)


def _unbroadcast(g: np.ndarray, shape: tuple, real: bool) -> np.ndarray:
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(shape)
    if real and np.iscomplexobj(g):
        g = g.real
    return g


def backward(outputs, seeds=None) -> dict[int, np.ndarray]:
    """Propagate cotangents from ``outputs`` to every node reachable from them.

    Parameters
    ----------
    outputs : Node or sequence of Node
    seeds : array or sequence of arrays, optional
        Cotangents of the outputs.  Defaults to ones (scalar losses).

    Returns
    -------
    dict
        Maps ``id(node)`` to its accumulated cotangent.
    """
    if isinstance(outputs, Node):
        outputs = [outputs]
        seeds = None if seeds is None else [seeds]
    outputs = [o for o in outputs]
    if seeds is None:
        seeds = [np.ones_like(o.value) for o in outputs]
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(o, False) for o in outputs if isinstance(o, Node)]
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
            if isinstance(p, Node) and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {}
    for o, s in zip(outputs, seeds):
        if not isinstance(o, Node) or s is None:
            continue
        s = np.asarray(s)
        grads[id(o)] = grads[id(o)] + s if id(o) in grads else s
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not isinstance(p, Node):
                continue
            pg = _unbroadcast(np.asarray(pg), p.value.shape, not np.iscomplexobj(p.value))
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return grads


def grad_of(grads: dict, node: Node) -> np.ndarray:
    """Cotangent of ``node`` from a :func:`backward` result, zeros if unreached."""
    g = grads.get(id(node))
    if g is None:
        return np.zeros_like(node.value)
    return g


# ----------------------------------------------------------------------------
# elementwise algebra


def add(a, b):
    out = value(a) + value(b)
    return _make(out, (a, b), lambda g: (g, g))


def sub(a, b):
    out = value(a) - value(b)
    return _make(out, (a, b), lambda g: (g, -g))


def neg(a):
    return _make(-value(a), (a,), lambda g: (-g,))


def mul(a, b):
    """Elementwise product with broadcasting."""
    va, vb = value(a), value(b)
    out = va * vb

    def bw(g):
        return np.conj(vb) * g, np.conj(va) * g

    return _make(out, (a, b), bw)


def div(a, b):
    """Elementwise quotient of real arrays."""
    va, vb = value(a), value(b)
    out = va / vb

    def bw(g):
        ga = g / vb
        return ga, -ga * out

    return _make(out, (a, b), bw)


def square(a):
    """Elementwise ``a * a`` for real arrays."""
    va = value(a)
    return _make(va * va, (a,), lambda g: (2.0 * va * g,))


def sqrt(a):
    """Elementwise square root of a positive real array."""
    out = np.sqrt(value(a))
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a):
    """Pointwise modulus; the gradient at zero is taken as zero."""
    va = value(a)
    out = np.abs(va)
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        return (np.where(out > 0, g / safe, 0.0) * va,)

    return _make(out, (a,), bw)


def rss(u, axis: int = 1):
    """Root of sum of squares of moduli over ``axis``; zero-safe gradient."""
    vu = value(u)
    out = np.sqrt(np.sum(np.abs(vu) ** 2, axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        return (np.where(out > 0, g / safe, 0.0) * vu,)

    return _make(out, (u,), bw)


def sum_(a, axis=None, keepdims: bool = False):
    va = value(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False):
    va = value(a)
    n = va.size if axis is None else np.prod([va.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def sum_sq(a, axis=None, keepdims: bool = False):
    """Sum of squared moduli."""
    va = value(a)
    out = np.sum(np.abs(va) ** 2, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * g * va,)

    return _make(out, (a,), bw)


def norm(a, axis=None, keepdims: bool = False):
    """Euclidean norm of the moduli; zero-safe gradient."""
    va = value(a)
    out = np.sqrt(np.sum(np.abs(va) ** 2, axis=axis, keepdims=keepdims))

    def bw(g):
        o, gg = out, g
        if axis is not None and not keepdims:
            o, gg = np.expand_dims(o, axis), np.expand_dims(gg, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, gg / safe, 0.0) * va,)

    return _make(out, (a,), bw)


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    va = value(a)
    return _make(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def concat(xs: Sequence, axis: int = 1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(xs), bw)


def take(a, index, axis: int = 0):
    """``np.take`` with scatter-add backward (handles repeated indices)."""
    va = value(a)
    index = np.asarray(index)
    out = np.take(va, index, axis=axis)

    def bw(g):
        ga = np.zeros_like(va, dtype=np.result_type(va, g))
        np.add.at(np.moveaxis(ga, axis, 0), index, np.moveaxis(g, axis, 0) if g.ndim else g)
        return (ga,)

    return _make(out, (a,), bw)


def channel_slice(a, start: int, stop: int):
    """Select channels ``start:stop`` along axis 1."""
    va = value(a)
    out = va[:, start:stop]

    def bw(g):
        ga = np.zeros_like(va, dtype=np.result_type(va, g))
        ga[:, start:stop] = g
        return (ga,)

    return _make(out, (a,), bw)


def stack(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _make(out, tuple(xs), bw)


# ----------------------------------------------------------------------------
# Fourier operators


def fft2(a):
    out = np.fft.fft2(value(a), norm="ortho")
    return _make(out, (a,), lambda g: (np.fft.ifft2(g, norm="ortho"),))


def ifft2(a):
    out = np.fft.ifft2(value(a), norm="ortho")
    return _make(out, (a,), lambda g: (np.fft.fft2(g, norm="ortho"),))


def fftshift(a):
    out = np.fft.fftshift(value(a), axes=(-2, -1))
    return _make(out, (a,), lambda g: (np.fft.ifftshift(g, axes=(-2, -1)),))


def ifftshift(a):
    out = np.fft.ifftshift(value(a), axes=(-2, -1))
    return _make(out, (a,), lambda g: (np.fft.fftshift(g, axes=(-2, -1)),))


def fidelity_grad(x, mask_f: np.ndarray, y_dense: np.ndarray):
    """``F^H P^T (P F x - y)`` for dense mask and zero-filled data."""
    return ifft2(sub(mul(mask_f, fft2(x)), y_dense))


# ----------------------------------------------------------------------------
# convolution layers


def conv(x, w, mode: str = "complex"):
    vx, vw = value(x), value(w)
    out = _cv.conv(vx, vw, mode)
    k = vw.shape[-1]

    def bw(g):
        gx = _cv.conv_adjoint(g, vw, mode) if isinstance(x, Node) else None
        gw = _cv.conv_weight_grad(vx, g, k, mode) if isinstance(w, Node) else None
        return gx, gw

    return _make(out, (x, w), bw)


def conv_adjoint(c, w, mode: str = "complex"):
    """Input-adjoint convolution as a differentiable operator."""
    vc, vw = value(c), value(w)
    out = _cv.conv_adjoint(vc, vw, mode)
    k = vw.shape[-1]

    def bw(g):
        # out is linear in c with map A^H, so its backward is A; in w it is
        # the mirror of the forward weight gradient.
        gc = _cv.conv(g, vw, mode) if isinstance(c, Node) else None
        gw = _cv.conv_weight_grad(g, vc, k, mode) if isinstance(w, Node) else None
        return gc, gw

    return _make(out, (c, w), bw)


def smooth_relu(x, delta: float):
    vx = value(x)
    out = _cv.smooth_relu(vx, delta)
    return _make(out, (x,), lambda g: (_cv.apply_packed(_cv.smooth_relu_deriv(vx, delta), g),))


def smooth_relu_vjp(pre, c, delta: float):
    """Cotangent ``c`` pulled back through the activation evaluated at ``pre``."""
    vp, vc = value(pre), value(c)
    d = _cv.smooth_relu_deriv(vp, delta)
    out = _cv.apply_packed(d, vc)

    def bw(g):
        gc = _cv.apply_packed(d, g)
        gp = _cv.apply_packed(_cv.smooth_relu_second(vp, delta), _cv.apply_packed(vc, g))
        return gp, gc

    return _make(out, (pre, c), bw)


# ----------------------------------------------------------------------------
# group-sparsity pieces


def _inner_re(a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    return np.sum((np.conj(a) * b).real, axis=axis, keepdims=True)


def smooth_normalize(F, eps: float, axis: int = 1):
    """Rows scaled by ``1 / sqrt(||F_j||^2 + eps^2)``, rows taken along ``axis``."""
    vF = value(F)
    s = np.sqrt(np.sum(np.abs(vF) ** 2, axis=axis, keepdims=True) + eps * eps)
    out = vF / s

    def bw(g):
        return (g / s - vF * (_inner_re(g, vF, axis) / s**3),)

    return _make(out, (F,), bw)


def soft_shrink(F, alpha, axis: int = 1):
    """Rowwise shrinkage ``F_j max(1 - alpha/||F_j||, 0)``; ``alpha`` may be a node."""
    vF, va = value(F), value(alpha)
    n = np.sqrt(np.sum(np.abs(vF) ** 2, axis=axis, keepdims=True))
    active = n > va
    safe = np.where(n > 0, n, 1.0)
    scale = np.where(active, 1.0 - va / safe, 0.0)
    out = vF * scale

    def bw(g):
        inner = _inner_re(g, vF, axis)
        gF = scale * g + np.where(active, va / safe**3, 0.0) * inner * vF
        ga = -np.where(active, inner / safe, 0.0)
        return gF, ga

    return _make(out, (F, alpha), bw)


def box_mean_valid(a, w: int):
    """Mean over ``w x w`` windows at valid positions of the last two axes."""
    from .imaging import box_mean_valid as _box

    va = value(a)
    out = _box(va, w)

    def bw(g):
        # Each input pixel receives the sum of cotangents of the windows
        # covering it.
        gp = np.pad(g, [(0, 0)] * (g.ndim - 2) + [(w - 1, w - 1), (w - 1, w - 1)])
        s = np.cumsum(np.cumsum(gp, axis=-2), axis=-1)
        s = np.pad(s, [(0, 0)] * (g.ndim - 2) + [(1, 0), (1, 0)])
        tot = s[..., w:, w:] - s[..., :-w, w:] - s[..., w:, :-w] + s[..., :-w, :-w]
        return (tot / (w * w),)

    return _make(out, (a,), bw)


def check_same_shape(a, b, what: str = "operands"):
    if value(a).shape != value(b).shape:
        raise DimensionMismatchError(f"{what} differ in shape: {value(a).shape} vs {value(b).shape}")
