"""Learnable feature extractors and the smoothed group-sparsity regularizer.

Feature maps are arrays of shape ``(..., d, H, W)``: the ``d`` channels at a
spatial position form one row ``F_j`` and the regularizer sums row norms over
all positions (and any leading batch axes).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .conv import check_mode, conv_weight_grad
from .errors import DimensionMismatchError, InvalidInputError

CHECKPOINT_FORMAT = "conviction-checkpoint"
CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# stack expressions shared by the numeric and differentiable paths


def stack_forward(weights: Sequence, x, delta: float, mode: str = "complex"):
    """Run a conv/activation stack; the last layer is linear.

    Returns the output together with the pre-activations, which
    :func:`stack_input_vjp` needs.
    """
    pres = []
    h = x
    last = len(weights) - 1
    for i, w in enumerate(weights):
        z = ad.conv(h, w, mode)
        if i < last:
            pres.append(z)
            h = ad.smooth_relu(z, delta)
        else:
            h = z
    return h, pres


def stack_input_vjp(weights: Sequence, pres: Sequence, cot, delta: float, mode: str = "complex"):
    """Pull a cotangent on the stack output back to its input."""
    c = cot
    for i in range(len(weights) - 1, -1, -1):
        c = ad.conv_adjoint(c, weights[i], mode)
        if i > 0:
            c = ad.smooth_relu_vjp(pres[i - 1], c, delta)
    return c


def reg_grad_expr(weights: Sequence, x, eps: float, delta: float, mode: str = "complex"):
    """Gradient of the unweighted smoothed regularizer at ``x`` (B, C, H, W)."""
    F, pres = stack_forward(weights, x, delta, mode)
    return stack_input_vjp(weights, pres, ad.smooth_normalize(F, eps, axis=1), delta, mode)


# ----------------------------------------------------------------------------
# conv stacks


def _to4d(x) -> tuple[np.ndarray, int]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    if x.ndim == 4:
        return x, 4
    raise DimensionMismatchError(f"expected 2, 3 or 4 dimensions, got shape {x.shape}")


def _from4d(y: np.ndarray, ndim: int) -> np.ndarray:
    return y[0] if ndim in (2, 3) else y


@dataclass(frozen=True, eq=False)
class ConvStack:
    """Bias-free convolution stack with smoothed-ReLU activations.

    Parameters
    ----------
    layers : tuple of ndarray
        Kernels of shape ``(Cout, Cin, k, k)``; the last layer is linear.
    delta : float
        Activation smoothing constant.
    mode : {"complex", "split-real"}
    """

    layers: tuple
    delta: float = 1e-3
    mode: str = "complex"

    def __post_init__(self):
        layers = tuple(np.array(w, dtype=np.complex128) for w in self.layers)
        if not layers:
            raise InvalidInputError("a conv stack needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise DimensionMismatchError(
                    f"layer with {prev.shape[0]} outputs feeds a layer expecting {nxt.shape[1]} inputs"
                )
        for w in layers:
            if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
                raise DimensionMismatchError(f"kernel shape {w.shape} is not (Cout, Cin, k, k) with odd k")
            w.flags.writeable = False
        if not self.delta > 0:
            raise InvalidInputError(f"activation smoothing must be positive, got {self.delta}")
        check_mode(self.mode)
        object.__setattr__(self, "layers", layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def with_layers(self, layers) -> "ConvStack":
        return ConvStack(tuple(layers), self.delta, self.mode)

    def __eq__(self, other):
        if not isinstance(other, ConvStack):
            return NotImplemented
        return (
            self.delta == other.delta
            and self.mode == other.mode
            and len(self.layers) == len(other.layers)
            and all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))
        )

    __hash__ = None  # type: ignore[assignment]


def xavier_kernel(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    """Complex kernel with real and imaginary parts uniform in a Xavier range.

    Each part is drawn from ``U(-s, s)`` with ``s = sqrt(6/(fan_in+fan_out))/sqrt(2)``
    so the complex entries have the usual Xavier variance.
    """
    lim = math.sqrt(6.0 / (cin * k * k + cout * k * k)) / math.sqrt(2.0)
    shape = (cout, cin, k, k)
    return rng.uniform(-lim, lim, shape) + 1j * rng.uniform(-lim, lim, shape)


def init_conv_stack(
    rng: np.random.Generator,
    channels: Sequence[int],
    kernel_size: int = 3,
    delta: float = 1e-3,
    mode: str = "complex",
) -> ConvStack:
    """Xavier-initialised stack with ``channels = [in, hidden..., out]``."""
    if len(channels) < 2:
        raise InvalidInputError("channels must list at least input and output counts")
    layers = [xavier_kernel(rng, co, ci, kernel_size) for ci, co in zip(channels[:-1], channels[1:])]
    return ConvStack(tuple(layers), delta, mode)


def default_extractor(rng: np.random.Generator, in_channels: int = 1, features: int = 4, depth: int = 3,
                      kernel_size: int = 3, delta: float = 1e-3, mode: str = "complex") -> ConvStack:
    """Feature extractor with the default 3 layers of 4 kernels of size 3x3."""
    return init_conv_stack(rng, [in_channels] + [features] * depth, kernel_size, delta, mode)


def identity_stack(channels: int = 1, delta: float = 1e-3) -> ConvStack:
    """Single linear 1x1 layer acting as the identity."""
    return ConvStack((np.eye(channels, dtype=np.complex128)[:, :, None, None],), delta)


def conv_stack_forward(stack: ConvStack, x) -> np.ndarray:
    """Apply ``stack`` to an image ``(H, W)``, a stack ``(C, H, W)`` or a batch.

    Returns a feature map ``(d, H, W)`` (or ``(B, d, H, W)`` for batches).
    """
    x4, nd = _to4d(np.asarray(x, dtype=np.complex128))
    if x4.shape[1] != stack.in_channels:
        raise DimensionMismatchError(f"input has {x4.shape[1]} channels, stack expects {stack.in_channels}")
    out, _ = stack_forward(stack.layers, x4, stack.delta, stack.mode)
    return _from4d(out, nd)


def conv_stack_vjp(stack: ConvStack, x, cotangent) -> tuple[np.ndarray, list[np.ndarray]]:
    """Vector-Jacobian product of :func:`conv_stack_forward`.

    Returns
    -------
    grad_input : ndarray
        Same shape as ``x``.
    grad_weights : list of ndarray
        One gradient per layer, same shapes as the kernels.
    """
    x4, nd = _to4d(np.asarray(x, dtype=np.complex128))
    c4, _ = _to4d(np.asarray(cotangent, dtype=np.complex128))
    if x4.shape[1] != stack.in_channels:
        raise DimensionMismatchError(f"input has {x4.shape[1]} channels, stack expects {stack.in_channels}")
    expect = (x4.shape[0], stack.out_channels) + x4.shape[2:]
    if c4.shape != expect:
        raise DimensionMismatchError(f"cotangent shape {c4.shape} does not match output shape {expect}")
    ws, delta, mode = stack.layers, stack.delta, stack.mode
    hs = [x4]
    pres = []
    h = x4
    for i, w in enumerate(ws[:-1]):
        z = ad.conv(h, w, mode)
        pres.append(z)
        h = ad.smooth_relu(z, delta)
        hs.append(h)
    grads: list[np.ndarray] = [None] * len(ws)  # type: ignore[list-item]
    c = c4
    for i in range(len(ws) - 1, -1, -1):
        grads[i] = conv_weight_grad(hs[i], c, ws[i].shape[-1], mode)
        c = ad.conv_adjoint(c, ws[i], mode)
        if i > 0:
            c = ad.smooth_relu_vjp(pres[i - 1], c, delta)
    return c.reshape(np.shape(x)), grads


# ----------------------------------------------------------------------------
# group sparsity


def row_norms(F, axis: int = -3) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(np.asarray(F)) ** 2, axis=axis))


def l21_smoothed(F, eps: float, axis: int = -3) -> float:
    """Smoothed group norm ``sum_j sqrt(||F_j||^2 + eps^2) - eps``.

    ``eps = 0`` gives the exact l2,1 norm.  Rows run along ``axis``.
    """
    if eps < 0:
        raise InvalidInputError(f"smoothing must be nonnegative, got {eps}")
    sq = np.sum(np.abs(np.asarray(F)) ** 2, axis=axis)
    return float(np.sum(np.sqrt(sq + eps * eps) - eps))


def position_count(F, axis: int = -3) -> int:
    """Number of rows ``m`` in a feature map."""
    F = np.asarray(F)
    return F.size // F.shape[axis]


def soft_shrink(F, alpha: float, axis: int = -3) -> np.ndarray:
    """Rowwise soft shrinkage, the proximal map of ``alpha * ||.||_{2,1}``."""
    if alpha < 0:
        raise InvalidInputError(f"shrinkage threshold must be nonnegative, got {alpha}")
    F = np.asarray(F)
    n = np.sqrt(np.sum(np.abs(F) ** 2, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return F * np.where(n > alpha, 1.0 - alpha / safe, 0.0)


def lipschitz_bound(eps: float, L_g: float, M: float, m: int) -> float:
    """Lipschitz constant ``m (L_g + 2 M^2 / eps)`` of the smoothed regularizer gradient."""
    if eps <= 0:
        raise InvalidInputError("the bound needs eps > 0")
    if L_g < 0 or M < 0 or m <= 0:
        raise InvalidInputError("L_g, M must be nonnegative and m positive")
    return m * (L_g + 2.0 * M * M / eps)


def sigmoid(w: float) -> float:
    if w >= 0:
        return 1.0 / (1.0 + math.exp(-w))
    e = math.exp(w)
    return e / (1.0 + e)


@dataclass(frozen=True, eq=False)
class RegularizerSpec:
    """Weighted smoothed regularizer ``kappa * r_eps(g(x))``.

    ``kappa`` is ``sigmoid(omega)`` unless ``weight`` is given, in which case it
    is used directly (e.g. ``weight=1`` for an unweighted model term).
    """

    extractor: ConvStack
    eps: float
    omega: float = 0.0
    weight: float | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidInputError(f"smoothing must be positive, got {self.eps}")

    @property
    def kappa(self) -> float:
        return sigmoid(self.omega) if self.weight is None else float(self.weight)

    def with_eps(self, eps: float) -> "RegularizerSpec":
        return RegularizerSpec(self.extractor, eps, self.omega, self.weight)


def r_eps(spec: RegularizerSpec, x) -> tuple[float, np.ndarray]:
    """Value and gradient of ``kappa * r_eps`` at ``x``.

    The gradient is a single stack VJP with rows ``F_j / sqrt(||F_j||^2+eps^2)``.
    """
    x = np.asarray(x, dtype=np.complex128)
    x4, nd = _to4d(x)
    st = spec.extractor
    F, pres = stack_forward(st.layers, x4, st.delta, st.mode)
    value = spec.kappa * float(np.sum(np.sqrt(np.sum(np.abs(F) ** 2, axis=1) + spec.eps**2) - spec.eps))
    g = stack_input_vjp(st.layers, pres, ad.smooth_normalize(F, spec.eps, axis=1), st.delta, st.mode)
    return value, (spec.kappa * g).reshape(x.shape)


def r_eps_value(spec: RegularizerSpec, x) -> float:
    x4, _ = _to4d(np.asarray(x, dtype=np.complex128))
    st = spec.extractor
    F, _ = stack_forward(st.layers, x4, st.delta, st.mode)
    return spec.kappa * float(np.sum(np.sqrt(np.sum(np.abs(F) ** 2, axis=1) + spec.eps**2) - spec.eps))


# ----------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True, eq=False)
class SynthesisOperator:
    """Fusion stack mapping concatenated ``[F1, F2]`` features to one image."""

    fusion: ConvStack

    def __post_init__(self):
        if self.fusion.out_channels != 1:
            raise DimensionMismatchError("the fusion stack must produce a single channel")


def synthesis_fuse(op: SynthesisOperator, F1, F2) -> np.ndarray:
    """Apply the fusion stack to the channel concatenation ``[F1, F2]``."""
    a, nd = _to4d(np.asarray(F1, dtype=np.complex128))
    b, _ = _to4d(np.asarray(F2, dtype=np.complex128))
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionMismatchError(f"feature maps {a.shape} and {b.shape} are not compatible")
    cat = np.concatenate([a, b], axis=1)
    if cat.shape[1] != op.fusion.in_channels:
        raise DimensionMismatchError(
            f"concatenated features have {cat.shape[1]} channels, fusion expects {op.fusion.in_channels}"
        )
    out, _ = stack_forward(op.fusion.layers, cat, op.fusion.delta, op.fusion.mode)
    out = out[:, 0]
    return out[0] if nd in (2, 3) else out


# ----------------------------------------------------------------------------
# checkpoints


def encode_array(a) -> dict:
    """Nested-list encoding; complex entries become ``[re, im]`` pairs."""
    a = np.asarray(a)
    if np.iscomplexobj(a):
        pairs = np.stack([a.real, a.imag], axis=-1)
        return {"dtype": "complex128", "shape": list(a.shape), "data": pairs.tolist()}
    return {"dtype": "float64", "shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).tolist()}


def decode_array(doc: dict) -> np.ndarray:
    data = np.asarray(doc["data"], dtype=np.float64)
    shape = tuple(doc["shape"])
    if doc["dtype"] == "complex128":
        data = data.reshape(shape + (2,))
        return data[..., 0] + 1j * data[..., 1]
    return data.reshape(shape)


def stack_to_dict(stack: ConvStack, eps: float | None = None, omega: float | None = None) -> dict:
    doc = {
        "delta": stack.delta,
        "mode": stack.mode,
        "layers": [encode_array(w) for w in stack.layers],
    }
    if eps is not None:
        doc["eps"] = eps
    if omega is not None:
        doc["omega"] = omega
    return doc


def stack_from_dict(doc: dict) -> ConvStack:
    return ConvStack(tuple(decode_array(w) for w in doc["layers"]), doc["delta"], doc["mode"])


def save_checkpoint(path, payload: dict) -> Path:
    """Write a checkpoint document (JSON) with format and version fields."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    doc.update(payload)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path}: not a checkpoint document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc
