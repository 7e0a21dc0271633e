"""Grad-CAM, Grad-CAM+ (positive gradients) and Grad-CAM++ heatmaps.

All three combine the maps ``A[k]`` of one layer with per-channel weights and
clip the result at zero.  They differ only in the weights:

* Grad-CAM: mean gradient over each map.
* Grad-CAM+: mean of the positive part of the gradient.
* Grad-CAM++: alpha-weighted sum of the positive part of the gradient, with
  ``alpha = 1 / (2 + lam * g * sum(A[k]))`` per unit and ``alpha = 0`` where
  ``g == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn import Model, ScoreSpec, backward_to_layer, forward
from .tensor import FeatureMapMeta, ShapeError

METHODS = ("gradcam", "gradcam-plus", "gradcam-pp")


@dataclass(frozen=True)
class AttributionRequest:
    """What to attribute and how.

    ``alpha_override`` replaces every nonzero Grad-CAM++ alpha with one
    constant (used to compare against Grad-CAM+).  ``score_scale``
    multiplies the score whose gradient feeds the weights; alphas always use
    the unscaled pre-softmax gradient.
    """

    method: str
    layer_index: int
    score: ScoreSpec
    lam: float = 1.0
    alpha_eps: float = 0.0
    alpha_override: float | None = None
    score_scale: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.alpha_eps >= 0:
            raise ValueError("alpha epsilon must be nonnegative")


@dataclass
class AlphaField:
    values: np.ndarray
    terms: np.ndarray  # g * sum(A[k]) per unit, before lambda
    min_nonzero: float | None
    max_nonzero: float | None
    zero_gradient_count: int
    nonfinite_units: list[tuple[int, int, int]]
    clamped_count: int = 0


@dataclass
class RawHeatmap:
    values: np.ndarray
    request: AttributionRequest | None = None
    weights: np.ndarray | None = None
    alphas: AlphaField | None = None


def _check_maps(grads, activations=None) -> tuple[np.ndarray, FeatureMapMeta]:
    grads = np.asarray(grads)
    meta = FeatureMapMeta.of(grads)
    if activations is not None and np.shape(activations) != grads.shape:
        raise ShapeError(f"gradients {grads.shape} and activations {np.shape(activations)} differ")
    return grads, meta


def gradcam_weights(grads) -> np.ndarray:
    grads, meta = _check_maps(grads)
    return grads.sum(axis=(1, 2)) / meta.size


def gradcam_plus_weights(grads) -> np.ndarray:
    grads, meta = _check_maps(grads)
    return np.maximum(grads, 0).sum(axis=(1, 2)) / meta.size


def _field(values, grads, terms, clamped=0) -> AlphaField:
    nz = grads != 0
    finite = nz & np.isfinite(values)
    picked = values[finite & (values != 0)]
    bad = np.argwhere(nz & ~np.isfinite(values))
    return AlphaField(
        values=values,
        terms=terms,
        min_nonzero=float(picked.min()) if picked.size else None,
        max_nonzero=float(picked.max()) if picked.size else None,
        zero_gradient_count=int(np.count_nonzero(~nz)),
        nonfinite_units=[tuple(int(v) for v in u) for u in bad],
        clamped_count=int(clamped),
    )


def alpha_stable(grads, activations, lam: float = 1.0, alpha_eps: float = 0.0) -> AlphaField:
    """Grad-CAM++ alphas in the divided-through form ``1 / (2 + lam*g*sum(A))``.

    ``grads`` must be pre-softmax gradients.  Units with ``g == 0`` (exact
    test) get 0.  With ``alpha_eps == 0`` nothing is clamped, so a
    denominator near zero produces a huge alpha and an exact zero produces
    ``inf`` (listed in ``nonfinite_units``).  With ``alpha_eps > 0``, units with
    ``|denominator| < alpha_eps`` get 0 and are counted in ``clamped_count``.
    """
    grads, _ = _check_maps(grads, activations)
    activations = np.asarray(activations, dtype=grads.dtype)
    terms = grads * activations.sum(axis=(1, 2), keepdims=True)
    denom = 2 + lam * terms
    nz = grads != 0
    with np.errstate(divide="ignore"):
        values = np.where(nz, 1 / denom, 0).astype(grads.dtype)
    clamped = 0
    if alpha_eps > 0:
        small = nz & (np.abs(denom) < alpha_eps)
        clamped = np.count_nonzero(small)
        values[small] = 0
    return _field(values, grads, terms, clamped)


def alpha_cubic(grads, activations, lam: float = 1.0) -> AlphaField:
    """Grad-CAM++ alphas from squared and cubed gradients.

    Equal to ``alpha_stable`` in exact arithmetic; in floating point the
    powers can underflow or overflow where the stable form does not.
    """
    grads, _ = _check_maps(grads, activations)
    activations = np.asarray(activations, dtype=grads.dtype)
    sums = activations.sum(axis=(1, 2), keepdims=True)
    g2 = grads * grads
    g3 = g2 * grads
    nz = grads != 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        values = np.where(nz, g2 / (2 * g2 + lam * sums * g3), 0).astype(grads.dtype)
    return _field(values, grads, grads * sums)


def constant_alphas(field: AlphaField, value: float) -> AlphaField:
    """Replace every nonzero alpha (non-finite ones included) with ``value``."""
    nz = field.values != 0
    values = np.where(nz, value, 0).astype(field.values.dtype)
    extreme = float(value) if nz.any() else None
    return replace(field, values=values, nonfinite_units=[], min_nonzero=extreme, max_nonzero=extreme)


def gradcampp_weights(grads, activations, alphas: AlphaField | np.ndarray) -> np.ndarray:
    """``w[k] = sum_ij alpha[k,i,j] * relu(g[k,i,j])``.

    Units with ``relu(g) == 0`` contribute exactly 0 whatever their alpha,
    including a non-finite one.
    """
    grads, _ = _check_maps(grads, activations)
    values = alphas.values if isinstance(alphas, AlphaField) else np.asarray(alphas)
    if values.shape != grads.shape:
        raise ShapeError(f"alphas {values.shape} and gradients {grads.shape} differ")
    pos = np.maximum(grads, 0)
    with np.errstate(invalid="ignore"):
        terms = np.where(pos > 0, values * pos, 0)
    return terms.sum(axis=(1, 2))


def combine_maps(weights, activations) -> np.ndarray:
    activations = np.asarray(activations)
    FeatureMapMeta.of(activations)
    weights = np.asarray(weights)
    if weights.shape != (activations.shape[0],):
        raise ShapeError(f"{weights.shape} weights for {activations.shape[0]} maps")
    combo = np.tensordot(weights, activations, axes=(0, 0))
    return np.maximum(combo, 0)


def attribute(model: Model, image, request: AttributionRequest) -> RawHeatmap:
    trace = forward(model, image)
    layer = request.layer_index
    grads = backward_to_layer(model, trace, request.score, layer)
    if request.score_scale != 1.0:
        grads = grads * request.score_scale
    activations = trace.activations[layer]
    alphas = None
    if request.method == "gradcam":
        weights = gradcam_weights(grads)
    elif request.method == "gradcam-plus":
        weights = gradcam_plus_weights(grads)
    else:
        if request.score.mode == "pre" and request.score_scale == 1.0:
            pre = grads
        else:
            pre = backward_to_layer(model, trace, ScoreSpec(request.score.class_index, "pre"), layer)
        alphas = alpha_stable(pre, activations, request.lam, request.alpha_eps)
        if request.alpha_override is not None:
            alphas = constant_alphas(alphas, request.alpha_override)
        weights = gradcampp_weights(grads, activations, alphas)
    return RawHeatmap(combine_maps(weights, activations), request, weights, alphas)
