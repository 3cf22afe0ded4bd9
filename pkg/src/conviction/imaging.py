"""Fourier forward model, sampling masks, phantoms, coil utilities and metrics.

All k-space arrays use the unshifted FFT layout, so the DC coefficient sits at
index ``[0, 0]``.  Images are complex128 arrays of shape ``(H, W)``; coil
stacks carry a leading coil axis ``(Nc, H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidInputError,
    InvalidRatioError,
    UndefinedReferenceError,
)

PATTERNS = ("radial", "cartesian-rows", "uniform-random", "full")
GOLDEN_ANGLE = math.pi * (math.sqrt(5.0) - 1.0) / 2.0
CENTER_BAND_FRACTION = 0.04


def as_image(x, name: str = "image") -> np.ndarray:
    """Return ``x`` as a finite complex128 array with at least two dims."""
    arr = np.asarray(x)
    if arr.ndim < 2:
        raise InvalidInputError(f"{name} must have at least 2 dimensions, got {arr.ndim}")
    arr = arr.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def fft2(img) -> np.ndarray:
    """Unitary 2D DFT over the last two axes."""
    return np.fft.fft2(as_image(img), norm="ortho")


def ifft2(kspace) -> np.ndarray:
    """Inverse of :func:`fft2`."""
    return np.fft.ifft2(as_image(kspace, "k-space"), norm="ortho")


# ----------------------------------------------------------------------------
# masks


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Binary k-space sampling pattern.

    Attributes
    ----------
    pattern : str
        One of ``radial``, ``cartesian-rows``, ``uniform-random``, ``full``.
    ratio : float
        Requested sampling ratio.
    cells : ndarray of bool, shape (H, W)
        Sampled cells in unshifted layout.
    seed : int
    """

    pattern: str
    ratio: float
    cells: np.ndarray
    seed: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.ndim != 2:
            raise InvalidInputError("mask cells must be a 2D array")
        cells = cells.copy()
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    @property
    def achieved_ratio(self) -> float:
        return self.count / self.cells.size

    def as_float(self) -> np.ndarray:
        return self.cells.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            self.pattern == other.pattern
            and self.ratio == other.ratio
            and self.seed == other.seed
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.pattern, self.ratio, self.seed, self.cells.tobytes()))


def _check_ratio(ratio) -> float:
    ratio = float(ratio)
    if not (0.0 < ratio <= 1.0) or not math.isfinite(ratio):
        raise InvalidRatioError(f"sampling ratio must lie in (0, 1], got {ratio}")
    return ratio


def _radial_cells(ratio: float, height: int, width: int) -> np.ndarray:
    # Built in centred coordinates and shifted at the end.
    target = max(1, int(round(ratio * height * width)))
    cy, cx = height // 2, width // 2
    centred = np.zeros((height, width), dtype=bool)
    centred[cy, cx] = True
    count = 1
    radius = math.hypot(height, width) / 2.0 + 1.0
    steps = np.arange(-radius, radius + 0.25, 0.25)
    k = 0
    max_lines = 16 * max(height, width)
    while count < target and k < max_lines:
        theta = k * GOLDEN_ANGLE
        rows = np.rint(cy + steps * math.sin(theta)).astype(int)
        cols = np.rint(cx + steps * math.cos(theta)).astype(int)
        keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        pts = np.unique(np.stack([rows[keep], cols[keep]], axis=1), axis=0)
        new = pts[~centred[pts[:, 0], pts[:, 1]]]
        if len(new):
            dist = np.hypot(new[:, 0] - cy, new[:, 1] - cx)
            order = np.lexsort((new[:, 1], new[:, 0], dist))
            new = new[order][: target - count]
            centred[new[:, 0], new[:, 1]] = True
            count += len(new)
        k += 1
    if count < target:
        # Lines no longer reach the leftover cells; fill by distance.
        rr, cc = np.nonzero(~centred)
        dist = np.hypot(rr - cy, cc - cx)
        order = np.lexsort((cc, rr, dist))[: target - count]
        centred[rr[order], cc[order]] = True
    return np.fft.ifftshift(centred)


def _cartesian_cells(ratio: float, height: int, width: int, rng) -> np.ndarray:
    band = max(1, math.ceil(CENTER_BAND_FRACTION * height))
    n_rows = min(height, max(band, int(round(ratio * height))))
    start = height // 2 - band // 2
    chosen = set(range(start, start + band))
    rest = np.array([r for r in range(height) if r not in chosen], dtype=int)
    extra = rng.choice(rest, size=n_rows - band, replace=False) if n_rows > band else []
    centred = np.zeros((height, width), dtype=bool)
    centred[sorted(chosen.union(int(r) for r in extra)), :] = True
    return np.fft.ifftshift(centred, axes=0)


def _uniform_cells(ratio: float, height: int, width: int, rng) -> np.ndarray:
    total = height * width
    target = max(1, int(round(ratio * total)))
    flat = np.zeros(total, dtype=bool)
    flat[0] = True  # DC
    picks = rng.choice(np.arange(1, total), size=target - 1, replace=False)
    flat[picks] = True
    return flat.reshape(height, width)


def make_mask(
    pattern: Literal["radial", "cartesian-rows", "uniform-random", "full"],
    ratio: float,
    height: int,
    width: int,
    seed: int = 0,
) -> SamplingMask:
    """Generate a sampling mask.

    Parameters
    ----------
    pattern
        ``radial`` draws lines through the k-space centre at golden-angle
        increments.  ``cartesian-rows`` keeps a fully sampled band of 4% of the
        rows and draws the remaining rows uniformly.  ``uniform-random`` draws
        cells uniformly.  ``full`` samples every cell and needs ``ratio == 1``.
    ratio
        Target fraction of sampled cells, in (0, 1].
    height, width
        Grid size.
    seed
        Seed for the random patterns. Radial masks are deterministic anyway.

    Returns
    -------
    SamplingMask

    Raises
    ------
    InvalidRatioError
        If ``ratio`` is outside (0, 1], or ``pattern == "full"`` with ratio < 1.
    """
    ratio = _check_ratio(ratio)
    height, width = int(height), int(width)
    if height < 1 or width < 1:
        raise InvalidInputError("mask dimensions must be positive")
    rng = np.random.default_rng(seed)
    if pattern == "full":
        if ratio != 1.0:
            raise InvalidRatioError("the full pattern requires ratio 1")
        cells = np.ones((height, width), dtype=bool)
    elif pattern == "radial":
        cells = _radial_cells(ratio, height, width)
    elif pattern == "cartesian-rows":
        cells = _cartesian_cells(ratio, height, width, rng)
    elif pattern == "uniform-random":
        cells = _uniform_cells(ratio, height, width, rng)
    else:
        raise InvalidInputError(f"unknown mask pattern {pattern!r}; expected one of {PATTERNS}")
    return SamplingMask(pattern, ratio, cells, int(seed))


# ----------------------------------------------------------------------------
# measurements


@dataclass(frozen=True, eq=False)
class KSpaceData:
    """Measured k-space samples.

    ``values`` has one entry per sampled cell in row-major mask order, with an
    optional leading coil axis.
    """

    mask: SamplingMask
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128)
        if vals.ndim not in (1, 2) or vals.shape[-1] != self.mask.count:
            raise DimensionMismatchError(
                f"k-space values of shape {vals.shape} do not match {self.mask.count} sampled cells"
            )
        object.__setattr__(self, "values", vals)

    @property
    def n_coils(self) -> int | None:
        return None if self.values.ndim == 1 else self.values.shape[0]

    def dense(self) -> np.ndarray:
        """Zero-filled k-space array of shape ``(..., H, W)``."""
        lead = self.values.shape[:-1]
        out = np.zeros(lead + self.mask.shape, dtype=np.complex128)
        out[..., self.mask.cells] = self.values
        return out


def _check_dims(x: np.ndarray, mask: SamplingMask):
    if x.shape[-2:] != mask.shape:
        raise DimensionMismatchError(f"image shape {x.shape[-2:]} does not match mask shape {mask.shape}")


def forward_op(x, mask: SamplingMask) -> KSpaceData:
    """Apply the undersampled Fourier operator ``P F``.

    ``x`` may be a single image ``(H, W)`` or a coil stack ``(Nc, H, W)``.
    """
    x = as_image(x)
    if x.ndim > 3:
        raise InvalidInputError("forward_op accepts (H, W) or (Nc, H, W) arrays")
    _check_dims(x, mask)
    return KSpaceData(mask, fft2(x)[..., mask.cells])


def adjoint_op(y: KSpaceData) -> np.ndarray:
    """Apply ``F^H P^T``: zero-fill the unsampled cells and invert the DFT."""
    return np.fft.ifft2(y.dense(), norm="ortho")


def zero_filled(y: KSpaceData) -> np.ndarray:
    """Zero-filled reconstruction, the default initial iterate.

    Identical to :func:`adjoint_op`.
    """
    return adjoint_op(y)


def fidelity_grad_dense(x: np.ndarray, mask_f: np.ndarray, y_dense: np.ndarray) -> np.ndarray:
    """``F^H P^T (P F x - y)`` with the mask and data given as dense arrays."""
    return np.fft.ifft2(mask_f * np.fft.fft2(x, norm="ortho") - y_dense, norm="ortho")


def data_fidelity(x, y: KSpaceData, mask: SamplingMask | None = None) -> tuple[float, np.ndarray]:
    """Least-squares data term and its gradient.

    Returns
    -------
    value : float
        ``0.5 * ||P F x - y||^2``, summed over coils for stacks.
    grad : ndarray
        ``F^H P^T (P F x - y)``, same shape as ``x``.
    """
    mask = y.mask if mask is None else mask
    x = as_image(x)
    _check_dims(x, mask)
    if x.shape[:-2] != y.values.shape[:-1]:
        raise DimensionMismatchError(
            f"image leading shape {x.shape[:-2]} does not match measurement coils {y.values.shape[:-1]}"
        )
    y_dense = np.zeros_like(x)
    y_dense[..., mask.cells] = y.values
    mask_f = mask.as_float()
    resid = mask_f * np.fft.fft2(x, norm="ortho") - y_dense
    value = 0.5 * float(np.vdot(resid, resid).real)
    grad = np.fft.ifft2(resid, norm="ortho")
    return value, grad


def add_noise(y: KSpaceData, sigma: float, rng: np.random.Generator) -> KSpaceData:
    """Add circular complex Gaussian noise of standard deviation ``sigma`` per sample."""
    if sigma < 0:
        raise InvalidInputError("noise level must be nonnegative")
    if sigma == 0:
        return y
    noise = rng.standard_normal(y.values.shape) + 1j * rng.standard_normal(y.values.shape)
    return KSpaceData(y.mask, y.values + sigma / math.sqrt(2.0) * noise)


# ----------------------------------------------------------------------------
# phantoms

# (intensity, semi-axis a, semi-axis b, centre x, centre y, angle in degrees)
_ELLIPSES = np.array(
    [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0],
        [0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0],
        [0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0],
    ]
)
_CLASSIC_INTENSITY = np.array([2.0, -0.98, -0.02, -0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01])


def _render(n: int, ellipses: np.ndarray) -> np.ndarray:
    coords = (2.0 * (np.arange(n) + 0.5) / n) - 1.0
    xx, yy = np.meshgrid(coords, -coords)
    img = np.zeros((n, n))
    for inten, a, b, x0, y0, deg in ellipses:
        t = math.radians(deg)
        xr = (xx - x0) * math.cos(t) + (yy - y0) * math.sin(t)
        yr = -(xx - x0) * math.sin(t) + (yy - y0) * math.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += inten
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return img.astype(np.complex128)


def shepp_logan(n: int, variant: Literal["classic", "high-contrast"] = "high-contrast") -> np.ndarray:
    """Shepp-Logan phantom of size ``n x n`` normalised to unit peak magnitude.

    ``high-contrast`` uses the common modified intensities; ``classic`` keeps
    the original low-contrast ones.
    """
    n = int(n)
    if n < 8:
        raise InvalidInputError(f"phantom size must be at least 8, got {n}")
    table = _ELLIPSES.copy()
    if variant == "classic":
        table[:, 0] = _CLASSIC_INTENSITY
    elif variant != "high-contrast":
        raise InvalidInputError(f"unknown phantom variant {variant!r}")
    return _render(n, table)


def phantom_variant(n: int, rng: np.random.Generator, jitter: float = 1.0) -> np.ndarray:
    """Randomly perturbed high-contrast phantom for synthetic datasets.

    Ellipse centres, axes, angles and intensities of the inner structures are
    jittered; the skull stays fixed so images remain comparable.
    """
    if n < 8:
        raise InvalidInputError(f"phantom size must be at least 8, got {n}")
    table = _ELLIPSES.copy()
    inner = slice(2, None)
    k = len(table) - 2
    table[inner, 0] *= 1.0 + jitter * rng.uniform(-0.5, 0.5, k)
    table[inner, 1] *= 1.0 + jitter * rng.uniform(-0.25, 0.25, k)
    table[inner, 2] *= 1.0 + jitter * rng.uniform(-0.25, 0.25, k)
    table[inner, 3] += jitter * rng.uniform(-0.05, 0.05, k)
    table[inner, 4] += jitter * rng.uniform(-0.05, 0.05, k)
    table[inner, 5] += jitter * rng.uniform(-15.0, 15.0, k)
    table[1, 1:3] *= 1.0 + jitter * rng.uniform(-0.03, 0.03, 2)
    return _render(n, table)


# ----------------------------------------------------------------------------
# coils


def coil_sensitivities(n_coils: int, height: int, width: int) -> np.ndarray:
    """Smooth synthetic sensitivity maps of shape ``(Nc, H, W)``.

    Coils sit on a circle around the field of view; each map is a Gaussian
    falloff with a linear phase ramp.  Deterministic.
    """
    if n_coils < 1:
        raise InvalidInputError("need at least one coil")
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    maps = []
    for c in range(n_coils):
        ang = 2 * math.pi * c / n_coils
        cx, cy = 1.2 * math.cos(ang), 1.2 * math.sin(ang)
        mag = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 2.0)
        phase = 0.5 * (xx * math.cos(ang) + yy * math.sin(ang))
        maps.append(mag * np.exp(1j * phase))
    return np.asarray(maps, dtype=np.complex128)


def coil_images(img, n_coils: int) -> np.ndarray:
    """Modulate an image by synthetic sensitivities, giving a coil stack."""
    img = as_image(img)
    return coil_sensitivities(n_coils, *img.shape) * img


def rss(u) -> np.ndarray:
    """Pixelwise root of sum of squares over the leading coil axis."""
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[0] == 0:
        raise InvalidInputError("rss expects a nonempty (Nc, H, W) stack")
    return np.sqrt(np.sum(np.abs(u) ** 2, axis=0))


# ----------------------------------------------------------------------------
# metrics

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 7


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    ssim: float
    nmse: float
    rmse: float

    def as_row(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "nmse": self.nmse, "rmse": self.rmse}


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = as_image(x)
    ref = as_image(ref, "reference")
    if x.shape != ref.shape:
        raise DimensionMismatchError(f"shape {x.shape} does not match reference {ref.shape}")
    return x, ref


def psnr(x, ref) -> float:
    """``20 log10(max|ref| / sqrt(MSE))``; ``inf`` for identical images."""
    x, ref = _pair(x, ref)
    mse = float(np.mean(np.abs(x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(np.max(np.abs(ref)))
    if peak == 0.0:
        raise UndefinedReferenceError("PSNR undefined for an all-zero reference")
    return 20.0 * math.log10(peak / math.sqrt(mse))


def box_mean_valid(a: np.ndarray, w: int) -> np.ndarray:
    """Mean over every ``w x w`` window fully inside the last two axes."""
    s = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    s = np.pad(s, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    tot = s[..., w:, w:] - s[..., :-w, w:] - s[..., w:, :-w] + s[..., :-w, :-w]
    return tot / (w * w)


def ssim_window(shape) -> int:
    return min(SSIM_WINDOW, shape[-2], shape[-1])


def ssim(x, ref, data_range: float | None = None) -> float:
    """Mean SSIM of magnitudes over 7x7 uniform windows at valid positions.

    ``data_range`` defaults to ``max|ref|``.  Local variances use the
    population (``1/N``) normalisation.
    """
    x, ref = _pair(x, ref)
    a, b = np.abs(x), np.abs(ref)
    L = float(b.max()) if data_range is None else float(data_range)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    w = ssim_window(a.shape)
    mu_a, mu_b = box_mean_valid(a, w), box_mean_valid(b, w)
    var_a = box_mean_valid(a * a, w) - mu_a**2
    var_b = box_mean_valid(b * b, w) - mu_b**2
    cov = box_mean_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    if c1 == 0.0:
        # Both images zero: treat as identical.
        same = den == 0
        den = np.where(same, 1.0, den)
        num = np.where(same, 1.0, num)
    return float(np.mean(num / den))


def nmse(x, ref, denominator: Literal["reconstruction", "reference"] = "reconstruction") -> float:
    """Normalised squared error.

    ``denominator="reconstruction"`` divides by ``||x||^2``; ``"reference"``
    divides by ``||ref||^2``, the more common convention.
    """
    x, ref = _pair(x, ref)
    if not np.any(ref):
        raise UndefinedReferenceError("NMSE undefined for an all-zero reference")
    err = float(np.sum(np.abs(x - ref) ** 2))
    if err == 0.0:
        return 0.0
    base = x if denominator == "reconstruction" else ref
    if denominator not in ("reconstruction", "reference"):
        raise InvalidInputError(f"unknown NMSE denominator {denominator!r}")
    den = float(np.sum(np.abs(base) ** 2))
    if den == 0.0:
        return math.inf
    return err / den


def rmse(x, ref) -> float:
    """Relative error ``||x - ref|| / ||ref||``."""
    x, ref = _pair(x, ref)
    den = float(np.linalg.norm(ref))
    if den == 0.0:
        raise UndefinedReferenceError("relative error undefined for an all-zero reference")
    return float(np.linalg.norm(x - ref)) / den


def metrics(x, ref, nmse_denominator: str = "reconstruction") -> MetricsReport:
    """Compute PSNR, SSIM, NMSE and RMSE of ``x`` against ``ref``."""
    return MetricsReport(
        psnr=psnr(x, ref),
        ssim=ssim(x, ref),
        nmse=nmse(x, ref, nmse_denominator),
        rmse=rmse(x, ref),
    )
