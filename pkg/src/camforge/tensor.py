"""Dense arrays used throughout the package.

Tensors are plain row-major numpy arrays of ``float32`` or ``float64``.  This
module only adds the handful of checked operations the rest of the code
relies on, plus the feature-map bookkeeping for a ``[K, H, W]`` layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISIONS = {32: np.float32, 64: np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(values, precision: int = 64) -> np.ndarray:
    """Copy ``values`` into a C-contiguous float array of the given precision.

    Conversion between precisions rounds to nearest (numpy's default cast).
    """
    try:
        dtype = PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {precision!r}") from None
    return np.array(values, dtype=dtype, order="C", copy=True)


def precision_of(t: np.ndarray) -> int:
    if t.dtype == np.float32:
        return 32
    if t.dtype == np.float64:
        return 64
    raise TypeError(f"unsupported tensor dtype {t.dtype}")


def elementwise(op: str, a: np.ndarray, b: np.ndarray | None = None, *, scale: float | None = None) -> np.ndarray:
    """Apply one of ``add``, ``mul``, ``relu`` or ``scale``.

    Binary ops require identical shapes; there is no broadcasting.
    """
    a = np.asarray(a)
    if op in ("add", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return a + b if op == "add" else a * b
    if op == "relu":
        return np.maximum(a, 0).astype(a.dtype, copy=False)
    if op == "scale":
        if scale is None:
            raise ValueError("scale needs a factor")
        return a * scale
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(op: str, t: np.ndarray, axes=None) -> np.ndarray:
    """Reduce with ``sum``, ``mean``, ``min`` or ``max`` over ``axes`` (all by default).

    ``mean`` is computed as ``sum / count``.
    """
    t = np.asarray(t)
    if axes is None:
        axes = tuple(range(t.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise ShapeError(f"axis {ax} out of range for rank {t.ndim}")
    count = 1
    for ax in axes:
        count *= t.shape[ax]
    if count == 0:
        raise ShapeError("reduction over an empty axis")
    if op == "sum":
        return np.sum(t, axis=axes)
    if op == "mean":
        return np.sum(t, axis=axes) / count
    if op == "min":
        return np.min(t, axis=axes)
    if op == "max":
        return np.max(t, axis=axes)
    raise ValueError(f"unknown reduction {op!r}")


@dataclass(frozen=True)
class FeatureMapMeta:
    map_count: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.map_count <= 0:
            raise ShapeError(f"empty feature map {self.map_count}x{self.height}x{self.width}")

    @property
    def size(self) -> int:
        """Number of units per map (``Z``)."""
        return self.height * self.width

    @classmethod
    def of(cls, t: np.ndarray) -> "FeatureMapMeta":
        if np.ndim(t) != 3:
            raise ShapeError(f"feature maps must be rank-3 [K, H, W], got shape {np.shape(t)}")
        k, h, w = np.shape(t)
        return cls(k, h, w)
