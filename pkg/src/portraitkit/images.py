"""Raster helpers: 8-bit image I/O, masks, bilinear resampling and the
pixel <-> latent affine map.

Images are float64 arrays of shape (H, W, C) with C in {1, 3} and nominal
range [0, 1]. Masks are float64 arrays of shape (H, W) with weights in [0, 1].
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
from PIL import Image


class ImageIOError(Exception):
    """Base class for image read/write failures."""


class ImageNotFoundError(ImageIOError, FileNotFoundError):
    pass


class UnsupportedImageError(ImageIOError, ValueError):
    """Wrong container, bit depth or channel layout."""


class TruncatedImageError(ImageIOError, ValueError):
    pass


class ImageWriteError(ImageIOError, OSError):
    pass


_PNM_HEADER = re.compile(rb"\A(P[56])(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def check_image(img: np.ndarray, signed: bool = False) -> np.ndarray:
    """Validate an image array and return it as float64 (H, W, C).

    ``signed`` relaxes the [0, 1] range check for intermediate arrays such as
    recentered high-frequency maps.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if not signed and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("image values outside [0, 1]")
    return arr


def check_mask(mask: np.ndarray, shape: tuple[int, ...] | None = None) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask weights must lie in [0, 1]")
    if shape is not None and tuple(m.shape) != tuple(shape[:2]):
        raise ValueError(f"mask shape {m.shape} does not match grid {tuple(shape[:2])}")
    return m


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to uint8 with round-half-away-from-zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    # snap float residue so e.g. 0.5 +- 1e-16 does not straddle the 127.5 tie
    v = np.round(v, 9)
    # values are non-negative, so floor(x + 0.5) is half-away-from-zero
    return np.floor(v + 0.5).astype(np.uint8)


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    match = _PNM_HEADER.match(raw)
    if match is None:
        if raw[:2] in (b"P5", b"P6"):
            raise TruncatedImageError(f"{path}: incomplete PNM header")
        raise UnsupportedImageError(f"{path}: only binary P5/P6 PNM is supported")
    magic, w, h, maxval = match.group(1), int(match.group(2)), int(match.group(3)), int(match.group(4))
    if maxval != 255:
        raise UnsupportedImageError(f"{path}: maxval {maxval}, only 8-bit (255) is supported")
    if w < 1 or h < 1:
        raise UnsupportedImageError(f"{path}: empty image")
    channels = 1 if magic == b"P5" else 3
    payload = raw[match.end():]
    need = w * h * channels
    if len(payload) < need:
        raise TruncatedImageError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, channels)
    return data


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedImageError(f"{path}: not a PNG or PNM file")
            if im.mode not in ("L", "RGB"):
                raise UnsupportedImageError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit L or RGB)")
            im.load()
            data = np.asarray(im, dtype=np.uint8)
    except UnsupportedImageError:
        raise
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise ImageNotFoundError(str(path)) from exc
        if "truncated" in str(exc).lower() or isinstance(exc, (SyntaxError, EOFError)):
            raise TruncatedImageError(f"{path}: {exc}") from exc
        raise UnsupportedImageError(f"{path}: {exc}") from exc
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG or binary PGM/PPM; pixel value p maps to p / 255."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"no such image: {path}")
    with path.open("rb") as fh:
        head = fh.read(8)
    if head[:2] in (b"P5", b"P6"):
        data = _read_pnm(path)
    elif head.startswith(b"\x89PNG"):
        data = _read_png(path)
    else:
        raise UnsupportedImageError(f"{path}: not a PNG or binary PNM file")
    return data.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` as 8-bit PNG (``.png``) or PGM/PPM (``.pgm``/``.ppm``)."""
    arr = check_image(img, signed=True)
    path = Path(path)
    q = quantize(arr)
    suffix = path.suffix.lower()
    try:
        if suffix == ".png":
            mode = "L" if q.shape[2] == 1 else "RGB"
            Image.fromarray(q[:, :, 0] if mode == "L" else q, mode=mode).save(
                path, format="PNG", compress_level=6, optimize=False
            )
        elif suffix in (".pgm", ".ppm", ".pnm"):
            if suffix == ".pgm" and q.shape[2] != 1:
                raise UnsupportedImageError("PGM output needs a single-channel image")
            if suffix == ".ppm" and q.shape[2] != 3:
                raise UnsupportedImageError("PPM output needs a 3-channel image")
            magic = b"P5" if q.shape[2] == 1 else b"P6"
            header = b"%s\n%d %d\n255\n" % (magic, q.shape[1], q.shape[0])
            path.write_bytes(header + q.tobytes())
        else:
            raise UnsupportedImageError(f"unsupported output extension {suffix!r}")
    except OSError as exc:
        raise ImageWriteError(f"cannot write {path}: {exc}") from exc


def load_mask(path: str | os.PathLike, shape: tuple[int, ...] | None = None) -> np.ndarray:
    img = load_image(path)
    if img.shape[2] != 1:
        raise UnsupportedImageError(f"{path}: masks must be single-channel")
    return check_mask(img[:, :, 0], shape)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centred coordinates and edge clamp.

    Works on any array whose first two axes are spatial; values are not
    range-checked so latents can be resampled too.
    """
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be at least 1x1")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    lo, hi, f = _axis_weights(h, new_h)
    f = f.reshape((-1,) + (1,) * (arr.ndim - 1))
    rows = arr[lo] * (1.0 - f) + arr[hi] * f
    lo, hi, f = _axis_weights(w, new_w)
    f = f.reshape((1, -1) + (1,) * (arr.ndim - 2))
    return rows[:, lo] * (1.0 - f) + rows[:, hi] * f


def encode(img: np.ndarray) -> np.ndarray:
    """Map pixel intensities [0, 1] to latent values [-1, 1]."""
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def decode(z: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode`, clamped to the displayable range."""
    return np.clip((np.asarray(z, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
