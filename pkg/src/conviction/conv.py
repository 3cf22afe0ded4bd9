"""Bias-free multichannel convolution kernels and the smoothed ReLU.

Arrays are laid out as ``(B, C, H, W)``.  Convolutions are cross-correlations
with "same" zero padding and odd square kernels of shape ``(Cout, Cin, k, k)``.

Two arithmetic modes are supported:

``complex``
    Full complex multiplication between kernel and input.
``split-real``
    Real and imaginary parts are convolved independently with the real and
    imaginary parts of the kernel, i.e. a complex tensor is treated as two
    real tensors.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatchError, InvalidInputError

MODES = ("complex", "split-real")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise InvalidInputError(f"unknown arithmetic mode {mode!r}; expected one of {MODES}")
    return mode


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])


def _check(x: np.ndarray, w: np.ndarray):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionMismatchError(f"expected 4D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionMismatchError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise DimensionMismatchError(f"kernels must be odd and square, got {w.shape[2:]}")


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[-1]
    win = sliding_window_view(_pad(x, k // 2), (k, k), axis=(2, 3))  # B,Cin,H,W,k,k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,Cout
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _weight_grad(x: np.ndarray, cot: np.ndarray, k: int) -> np.ndarray:
    win = sliding_window_view(_pad(x, k // 2), (k, k), axis=(2, 3))
    return np.tensordot(cot, np.conj(win), axes=([0, 2, 3], [0, 2, 3]))  # Cout,Cin,k,k


def _adjoint_kernel(w: np.ndarray) -> np.ndarray:
    return np.conj(w[:, :, ::-1, ::-1]).transpose(1, 0, 2, 3)


def conv(x: np.ndarray, w: np.ndarray, mode: str = "complex") -> np.ndarray:
    """Same-padded cross-correlation of ``x`` (B, Cin, H, W) with ``w``."""
    _check(x, w)
    if mode == "complex":
        return _correlate(x, w)
    check_mode(mode)
    return _correlate(x.real, w.real) + 1j * _correlate(x.imag, w.imag)


def conv_adjoint(c: np.ndarray, w: np.ndarray, mode: str = "complex") -> np.ndarray:
    """Adjoint of :func:`conv` with respect to its input.

    Maps a cotangent of shape (B, Cout, H, W) to (B, Cin, H, W).
    """
    if c.ndim != 4 or c.shape[1] != w.shape[0]:
        raise DimensionMismatchError(f"cotangent {c.shape} does not match kernel {w.shape}")
    wa = _adjoint_kernel(w)
    if mode == "complex":
        return _correlate(c, wa)
    check_mode(mode)
    return _correlate(c.real, wa.real) + 1j * _correlate(c.imag, -wa.imag)


def conv_weight_grad(x: np.ndarray, cot: np.ndarray, k: int, mode: str = "complex") -> np.ndarray:
    """Gradient of ``Re<cot, conv(x, w)>`` with respect to ``w``."""
    if mode == "complex":
        return _weight_grad(x, cot, k)
    check_mode(mode)
    return _weight_grad(x.real, cot.real, k) + 1j * _weight_grad(x.imag, cot.imag, k)


# ----------------------------------------------------------------------------
# smoothed ReLU


def _check_delta(delta: float):
    if not delta > 0:
        raise InvalidInputError(f"activation smoothing must be positive, got {delta}")


def _srelu_real(v: np.ndarray, delta: float) -> np.ndarray:
    quad = v * v / (4 * delta) + v / 2 + delta / 4
    return np.where(v >= delta, v, np.where(v <= -delta, 0.0, quad))


def _srelu_d_real(v: np.ndarray, delta: float) -> np.ndarray:
    return np.where(v >= delta, 1.0, np.where(v <= -delta, 0.0, v / (2 * delta) + 0.5))


def _srelu_dd_real(v: np.ndarray, delta: float) -> np.ndarray:
    return np.where(np.abs(v) < delta, 1.0 / (2 * delta), 0.0)


def smooth_relu(v, delta: float = 1e-3) -> np.ndarray:
    """Smoothed rectified linear unit.

    Zero below ``-delta``, identity above ``delta`` and the quadratic
    ``v**2/(4 delta) + v/2 + delta/4`` in between.  Complex input is handled
    by applying the map to the real and imaginary parts separately.
    """
    _check_delta(delta)
    v = np.asarray(v)
    if np.iscomplexobj(v):
        return _srelu_real(v.real, delta) + 1j * _srelu_real(v.imag, delta)
    return _srelu_real(v.astype(np.float64, copy=False), delta)


def smooth_relu_deriv(v, delta: float = 1e-3) -> np.ndarray:
    """Derivative of :func:`smooth_relu`; componentwise for complex input.

    For complex ``v`` the result packs the real-part derivative in the real
    component and the imaginary-part derivative in the imaginary component.
    """
    _check_delta(delta)
    v = np.asarray(v)
    if np.iscomplexobj(v):
        return _srelu_d_real(v.real, delta) + 1j * _srelu_d_real(v.imag, delta)
    return _srelu_d_real(v.astype(np.float64, copy=False), delta)


def smooth_relu_second(v, delta: float = 1e-3) -> np.ndarray:
    """Second derivative of :func:`smooth_relu`, packed like the first."""
    _check_delta(delta)
    v = np.asarray(v)
    if np.iscomplexobj(v):
        return _srelu_dd_real(v.real, delta) + 1j * _srelu_dd_real(v.imag, delta)
    return _srelu_dd_real(v.astype(np.float64, copy=False), delta)


def apply_packed(d: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Multiply real and imaginary parts of ``c`` by those of ``d``."""
    if np.iscomplexobj(d) or np.iscomplexobj(c):
        return d.real * c.real + 1j * (d.imag * c.imag)
    return d * c
