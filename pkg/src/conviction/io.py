"""Binary image files, previews and CSV helpers."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .imaging import SamplingMask

CIMG_MAGIC = b"CIMG"
CIMG_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_cimg(path, img) -> Path:
    """Write a complex image as a CIMG file.

    Layout: 16-byte header (magic ``CIMG``, u32 height, u32 width, u32 format
    version) followed by little-endian float64 ``(re, im)`` pairs in row-major
    order.
    """
    img = np.asarray(img, dtype=np.complex128)
    if img.ndim != 2:
        raise InvalidInputError("CIMG stores single 2D images")
    path = Path(path)
    body = np.empty(img.shape + (2,), dtype="<f8")
    body[..., 0] = img.real
    body[..., 1] = img.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CIMG_MAGIC, img.shape[0], img.shape[1], CIMG_VERSION))
        fh.write(body.tobytes())
    return path


def read_cimg(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInputError(f"{path}: file too short for a CIMG header")
    magic, h, w, _version = _HEADER.unpack_from(data)
    if magic != CIMG_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + h * w * 16
    if len(data) != expected:
        raise InvalidInputError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(h, w, 2)
    return body[..., 0] + 1j * body[..., 1]


def write_pgm(path, img, peak: float | None = None) -> Path:
    """Write the magnitude of ``img`` as an 8-bit binary PGM."""
    mag = np.abs(np.asarray(img))
    if mag.ndim != 2:
        raise InvalidInputError("PGM export needs a 2D image")
    top = float(mag.max()) if peak is None else float(peak)
    scaled = np.zeros_like(mag) if top == 0 else np.clip(mag / top, 0.0, 1.0)
    pix = np.rint(scaled * 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mag.shape[1]} {mag.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_pbm(path, mask: SamplingMask) -> Path:
    """Write a mask as a plain PBM, centred (fftshifted) for viewing.

    PBM uses 1 for black, so sampled cells come out black.
    """
    cells = np.fft.fftshift(mask.cells)
    path = Path(path)
    lines = [f"P1\n{cells.shape[1]} {cells.shape[0]}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in cells]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pbm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P1":
        raise InvalidInputError(f"{path}: not a plain PBM")
    w, h = int(tokens[1]), int(tokens[2])
    bits = np.array([t == "1" for t in tokens[3:]], dtype=bool).reshape(h, w)
    return np.fft.ifftshift(bits)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    """Write dict rows to CSV with a stable column order."""
    path = Path(path)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
