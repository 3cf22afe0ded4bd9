"""Synthetic datasets and mini-batches for training the unrolled networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .imaging import SamplingMask, coil_sensitivities, phantom_variant, shepp_logan


@dataclass(frozen=True, eq=False)
class Batch:
    """Stacked network inputs.

    Attributes
    ----------
    y_dense : ndarray, (B, C, H, W)
        Zero-filled measurements in unshifted k-space layout.
    mask_f : ndarray
        Float mask broadcastable against ``y_dense``, usually (B, 1, H, W).
    ref : ndarray or None
        Reference images, (B, C_ref, H, W).
    task : ndarray of int, (B,)
        Task index of each sample (selects the regularizer weight logit).
    """

    y_dense: np.ndarray
    mask_f: np.ndarray
    ref: np.ndarray | None
    task: np.ndarray

    @property
    def size(self) -> int:
        return self.y_dense.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=int)
        return Batch(
            self.y_dense[idx],
            self.mask_f[idx] if self.mask_f.shape[0] == self.size else self.mask_f,
            None if self.ref is None else self.ref[idx],
            self.task[idx],
        )


def concat_batches(batches: Sequence[Batch]) -> Batch:
    return Batch(
        np.concatenate([b.y_dense for b in batches]),
        np.concatenate([np.broadcast_to(b.mask_f, (b.size,) + b.mask_f.shape[1:]) for b in batches]),
        None if batches[0].ref is None else np.concatenate([b.ref for b in batches]),
        np.concatenate([b.task for b in batches]),
    )


def measure(images: np.ndarray, mask: SamplingMask, rng: np.random.Generator | None = None,
            noise: float = 0.0) -> np.ndarray:
    """Zero-filled k-space ``P (F x + n)`` of a (N, C, H, W) image array."""
    k = np.fft.fft2(images, norm="ortho")
    if noise > 0:
        if rng is None:
            raise InvalidInputError("noise needs a random generator")
        k = k + noise / np.sqrt(2.0) * (rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape))
    return k * mask.as_float()


def phantom_set(n_images: int, n: int, rng: np.random.Generator, include_base: bool = False) -> np.ndarray:
    """(N, H, W) jittered phantoms; optionally the first is the unperturbed one."""
    imgs = [phantom_variant(n, rng) for _ in range(n_images)]
    if include_base and n_images:
        imgs[0] = shepp_logan(n)
    return np.asarray(imgs)


def single_coil_batch(images: np.ndarray, mask: SamplingMask, task: int = 0,
                      rng: np.random.Generator | None = None, noise: float = 0.0) -> Batch:
    """Batch for the single-image networks from (N, H, W) ground truth."""
    x = np.asarray(images, dtype=np.complex128)[:, None]
    y = measure(x, mask, rng, noise)
    m = np.broadcast_to(mask.as_float(), (x.shape[0], 1) + mask.shape).copy()
    return Batch(y, m, x, np.full(x.shape[0], task, dtype=int))


def multi_coil_batch(images: np.ndarray, mask: SamplingMask, n_coils: int, task: int = 0,
                     rng: np.random.Generator | None = None, noise: float = 0.0) -> Batch:
    """Batch of coil stacks ``s_i * v`` with synthetic sensitivities."""
    imgs = np.asarray(images, dtype=np.complex128)
    sens = coil_sensitivities(n_coils, *imgs.shape[-2:])
    u = sens[None] * imgs[:, None]
    y = measure(u, mask, rng, noise)
    m = np.broadcast_to(mask.as_float(), (u.shape[0], 1) + mask.shape).copy()
    return Batch(y, m, u, np.full(u.shape[0], task, dtype=int))


def joint_batch(triples: np.ndarray, masks: Sequence[SamplingMask], task: int = 0,
                rng: np.random.Generator | None = None, noise: float = 0.0) -> Batch:
    """Batch for the joint model: (N, 3, H, W) references, k-space for the first two."""
    refs = np.asarray(triples, dtype=np.complex128)
    if refs.ndim != 4 or refs.shape[1] != 3:
        raise InvalidInputError("joint references must be (N, 3, H, W)")
    mf = np.stack([masks[0].as_float(), masks[1].as_float()])[None]
    y = np.fft.fft2(refs[:, :2], norm="ortho")
    if noise > 0:
        y = y + noise / np.sqrt(2.0) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    y = y * mf
    m = np.broadcast_to(mf, (refs.shape[0], 2) + mf.shape[2:]).copy()
    return Batch(y, m, refs, np.full(refs.shape[0], task, dtype=int))


def synthetic_modalities(base: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Three contrast variants of a phantom: ``(x1, x2, x3)`` stacked on axis 0.

    The second and third contrasts are smooth pointwise remappings of the
    first, so the third is predictable from the other two.
    """
    a = np.abs(base)
    x1 = a
    x2 = np.where(a > 0, 1.0 - 0.7 * a, 0.0) * (a > 0)
    x3 = np.clip(0.6 * x1 + 0.5 * x2 ** 2, 0.0, None)
    out = np.stack([x1, x2, x3]).astype(np.complex128)
    peak = np.abs(out).reshape(3, -1).max(axis=1)
    return out / np.where(peak > 0, peak, 1.0)[:, None, None]
