"""Heatmap normalization, upsampling, explanation maps and Netpbm I/O.

Images are float arrays shaped ``[C, H, W]`` with values in [0, 1] and
``C`` either 1 (PGM) or 3 (PPM).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64
from .tensor import ShapeError

# blue -> cyan -> green -> yellow -> red
COLORMAP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_RGB = np.array([
    (0, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 0),
], dtype=np.float64)


class NetpbmError(ValueError):
    """Malformed or unsupported PGM/PPM file."""


@dataclass
class NormalizedHeatmap:
    values: np.ndarray
    degenerate: bool = False


def _values(h) -> np.ndarray:
    return np.asarray(getattr(h, "values", h), dtype=np.float64)


def min_max_normalize(h) -> NormalizedHeatmap:
    """Rescale to [0, 1]; a constant map becomes all zeros and is flagged degenerate."""
    v = _values(h)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return NormalizedHeatmap(np.zeros_like(v), True)
    return NormalizedHeatmap((v - lo) / (hi - lo), False)


def _axis_coords(src: int, dst: int):
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def bilinear_upsample(h, out_h: int, out_w: int):
    """Align-corners bilinear interpolation.

    Output pixel ``y`` samples source row ``y * (H - 1) / (out_h - 1)``, so the
    four corners map exactly onto the source corners.  Returns the same kind
    of object it was given (array or ``NormalizedHeatmap``).
    """
    v = _values(h)
    if v.ndim != 2:
        raise ShapeError(f"heatmap must be 2-D, got shape {v.shape}")
    src_h, src_w = v.shape
    if out_h < src_h or out_w < src_w:
        raise ShapeError(f"cannot upsample {v.shape} to smaller {(out_h, out_w)}")
    r0, r1, wr = _axis_coords(src_h, out_h)
    c0, c1, wc = _axis_coords(src_w, out_w)
    rows = v[r0] + wr[:, None] * (v[r1] - v[r0])
    out = rows[:, c0] + wc[None, :] * (rows[:, c1] - rows[:, c0])
    out = np.clip(out, v.min(), v.max())
    if isinstance(h, NormalizedHeatmap):
        return NormalizedHeatmap(out, h.degenerate)
    return out


def explanation_map(h, image) -> np.ndarray:
    """Pointwise product of a [0, 1] heatmap with every channel of the image."""
    v = _values(h)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[1:] != v.shape:
        raise ShapeError(f"heatmap {v.shape} does not match image {img.shape}")
    return v[None, :, :] * img


def to_image_size(h, image_shape) -> NormalizedHeatmap:
    """Normalize then upsample a raw heatmap to the image's spatial size."""
    return bilinear_upsample(min_max_normalize(h), image_shape[-2], image_shape[-1])


def apply_colormap(values) -> np.ndarray:
    """Map [0, 1] values to RGB in [0, 1] by piecewise-linear interpolation, shape [3, H, W]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    rgb = np.stack([np.interp(v, COLORMAP_STOPS, COLORMAP_RGB[:, ch]) for ch in range(3)])
    return rgb / 255.0


def overlay(h, image, opacity: float = 0.5) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    v = _values(h)
    if img.ndim != 3 or img.shape[1:] != v.shape:
        raise ShapeError(f"heatmap {v.shape} does not match image {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return (1 - opacity) * img + opacity * apply_colormap(v)


# Netpbm ----------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*)*(\S+)")


def _parse_header(data: bytes):
    fields, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise NetpbmError("truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise NetpbmError("missing whitespace after maxval")
    return fields, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    if data[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {data[:2]!r}; only binary P5/P6 are read")
    (magic, w, h, maxval), start = _parse_header(data)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise NetpbmError("non-integer header field") from None
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}; only 8-bit (255) files are read")
    if width < 1 or height < 1:
        raise NetpbmError("empty image")
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    raster = data[start:start + n]
    if len(raster) < n:
        raise NetpbmError(f"raster truncated: {len(raster)} of {n} bytes")
    pix = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_netpbm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"image must be [1|3, H, W], got {img.shape}")
    c, h, w = img.shape
    pix = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_image(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def write_image(image, path) -> None:
    """Write a PGM (1 channel) or PPM (3 channels); a gray image goes to PPM if the path ends in .ppm."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1 and str(path).lower().endswith(".ppm"):
        img = np.repeat(img, 3, axis=0)
    Path(path).write_bytes(encode_netpbm(img))


def write_overlay(h, image, path, opacity: float = 0.5) -> None:
    write_image(overlay(h, image, opacity), path)


def synthetic_image(seed: int, shape=(1, 16, 16), blobs: int = 3) -> np.ndarray:
    """Sum of a few seeded Gaussian blobs on a faint noise floor, scaled into [0, 1]."""
    c, h, w = shape
    gen = SplitMix64(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros(shape)
    for _ in range(blobs):
        cy, cx = gen.uniform() * (h - 1), gen.uniform() * (w - 1)
        sigma = 1.0 + gen.uniform() * max(h, w) / 4
        amp = 0.4 + 0.6 * gen.uniform()
        tint = np.array(gen.uniforms(c, 0.5, 1.0))[:, None, None]
        img += amp * tint * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    img += 0.05 * np.array(gen.uniforms(math.prod(shape))).reshape(shape)
    # 8-bit quantize so the image survives a PGM/PPM round-trip unchanged
    return np.rint(np.clip(img / img.max(), 0, 1) * 255) / 255.0
