"""Finite-difference audit of the Grad-CAM++ alpha derivation.

Everything here treats one layer's activations ``A`` as free variables and a
class score ``Y(A)`` as the function under study (a *head*).  The checks:

* ``check_corrected_derivative``: with the alphas frozen, the derivative of
  ``F(A) = sum_l (sum_ab alpha^l_ab dY/dA^l_ab) * sum_uv A^l_uv`` must equal
  ``sum_ab alpha^k_ab dY/dA^k_ab + sum_l sum(A^l) sum_ab alpha^l_ab d2Y/dA^k_ij dA^l_ab``.
  The shortened form without the cross-derivative sum is reported beside it.
* ``construct_beta_family``: many different alpha fields satisfy the single
  pooling equation ``sum C * alpha = Y``.
* ``pooling_residual``: how far a given alpha field is from satisfying it.
* ``linearity_shift_check``: alphas built from second and third derivatives
  do not see a linear term added to ``Y``, although the pooling equation does.
* ``lambda_sweep``: alphas for ``Y = exp(lam * S)`` change with ``lam``.

All arithmetic is 64-bit.  Finite differences use central stencils and
shrink the step when the stencil would straddle a ReLU or max-pool kink.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .cam import alpha_cubic, alpha_stable
from .nn import (Model, ScoreSpec, activation_pattern, backprop, backward_to_layer, conv2d, dense, flatten,
                 forward, forward_from, relu, seeded_params)
from .postproc import synthetic_image
from .rng import SplitMix64

FIRST_ORDER_STEP = 1e-4
HIGHER_ORDER_STEP = 1e-3
# the third difference loses eps/h**2 to roundoff; 1e-3 is too small once a linear term is added
THIRD_ORDER_STEP = 1e-2
# largest layer (maps, rows, cols) on which the linearity-shift check is asserted
SHIFT_TRACTABLE_SHAPE = (2, 3, 3)
MAX_STEP_SHRINKS = 4
ADMISSIBLE = 1e-9


class DerivCheckError(RuntimeError):
    pass


class KinkError(DerivCheckError):
    """A finite-difference stencil could not avoid a non-differentiable point."""


# backprop versus finite differences -------------------------------------------

def gradient_check(model, n_probes: int = 100, seed: int = 0, step: float = 1e-3, image=None) -> dict:
    """Backprop versus central differences at randomly chosen activation units, in 64-bit.

    Probes are spread over the input and every feature-map layer and cover
    both score modes.  A probe whose stencil cannot avoid a ReLU or max-pool
    kink (even after shrinking the step 1000x) is non-differentiable there
    and is replaced by a fresh draw; such replacements are counted.
    """
    model = model.astype(64)
    if image is None:
        image = synthetic_image(seed, model.input_shape)
    base = forward(model, image)
    layers = [-1] + model.spatial_layers()
    shapes = {i: (model.input_shape if i < 0 else model.shapes[i]) for i in layers}
    sizes = [math.prod(shapes[i]) for i in layers]
    total = sum(sizes)
    gen = SplitMix64(seed)
    grads = {}
    probes, seen, replaced = [], set(), 0
    while len(probes) < n_probes:
        flat = gen.below(total)
        if flat in seen:
            continue
        seen.add(flat)
        li = 0
        while flat >= sizes[li]:
            flat -= sizes[li]
            li += 1
        layer = layers[li]
        unit = tuple(int(v) for v in np.unravel_index(flat, shapes[layer]))
        mode = "pre" if gen.below(2) == 0 else "post"
        c = gen.below(model.class_count)
        point = base.input if layer < 0 else base.activations[layer]
        center = activation_pattern(model, forward_from(model, layer, point))
        h = step * max(1.0, abs(float(point[unit])))
        for _ in range(MAX_STEP_SHRINKS):
            plus, minus = point.copy(), point.copy()
            plus[unit] += h
            minus[unit] -= h
            tp, tm = forward_from(model, layer, plus), forward_from(model, layer, minus)
            if activation_pattern(model, tp) == center == activation_pattern(model, tm):
                break
            h /= 10
        else:
            replaced += 1
            continue
        key = (layer, c, mode)
        if key not in grads:
            grads[key] = backward_to_layer(model, base, ScoreSpec(c, mode), layer)
        bp = float(grads[key][unit])
        vec = "pre_softmax" if mode == "pre" else "post_softmax"
        fd = (float(getattr(tp, vec)[c]) - float(getattr(tm, vec)[c])) / (2 * h)
        err = abs(bp - fd) / max(1e-8, abs(fd))
        probes.append({"layer": layer, "unit": list(unit), "class": c, "mode": mode, "step": h,
                       "backprop": bp, "finite_difference": fd, "rel_error": err})
    return {
        "probes": probes,
        "max_rel_error": max(p["rel_error"] for p in probes) if probes else 0.0,
        "replaced_at_kinks": replaced,
    }


# heads ------------------------------------------------------------------------

class ModelHead:
    """Class score of a model as a function of one layer's activations.

    ``score`` picks ``Y``: ``"exp"`` for ``exp(S_c)``, ``"pre"`` for ``S_c``,
    ``"post"`` for the softmax probability.
    """

    def __init__(self, model: Model, image, layer_index: int, class_index: int | None = None,
                 score: str = "exp"):
        if score not in ("exp", "pre", "post"):
            raise ValueError(f"unknown score {score!r}")
        self.model = model if model.precision == 64 else model.astype(64)
        self.layer_index = layer_index
        trace = forward(self.model, image)
        if len(self.model.shapes[layer_index]) != 3:
            raise ValueError(f"layer {layer_index} is not a feature-map layer")
        self.activations = np.array(trace.activations[layer_index])
        self.class_index = int(np.argmax(trace.pre_softmax)) if class_index is None else class_index
        self.score = score

    def _trace(self, A):
        return forward_from(self.model, self.layer_index, A)

    def log_value(self, A) -> float:
        """``log Y`` for the exp score (i.e. ``S_c``); used to dodge overflow."""
        return float(self._trace(A).pre_softmax[self.class_index])

    def value(self, A) -> float:
        t = self._trace(A)
        s = float(t.pre_softmax[self.class_index])
        if self.score == "exp":
            return math.exp(s) if s < 709.0 else math.inf
        if self.score == "pre":
            return s
        return float(t.post_softmax[self.class_index])

    def _dscores(self, t):
        c = self.class_index
        d = np.zeros_like(t.pre_softmax)
        if self.score == "post":
            p = t.post_softmax
            d = -p[c] * p
            d[c] += p[c]
        else:
            d[c] = math.exp(t.pre_softmax[c]) if self.score == "exp" else 1.0
        return d

    def grad(self, A) -> np.ndarray:
        t = self._trace(A)
        return backprop(self.model, t, self._dscores(t), self.layer_index)

    def score_grad(self, A) -> np.ndarray:
        """Pre-softmax gradient ``dS_c/dA``, the input to the alpha formula."""
        t = self._trace(A)
        d = np.zeros_like(t.pre_softmax)
        d[self.class_index] = 1.0
        return backprop(self.model, t, d, self.layer_index)

    def pattern(self, A) -> bytes:
        return activation_pattern(self.model, self._trace(A))


class LinearHead:
    """``Y(A) = sum(weights * A) + const``."""

    score = "linear"

    def __init__(self, weights, const: float, activations):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.const = float(const)
        self.activations = np.array(activations, dtype=np.float64)

    def value(self, A):
        return float(np.sum(self.weights * A) + self.const)

    def grad(self, A):
        return self.weights.copy()

    score_grad = grad

    def pattern(self, A):
        return b""


class ShiftedHead:
    """``Y(A) + sum(lam * A) + const`` on top of another head."""

    def __init__(self, base, lam, const: float):
        self.base = base
        self.lam = np.asarray(lam, dtype=np.float64)
        self.const = float(const)
        self.activations = base.activations
        self.score = "shifted"

    def value(self, A):
        return self.base.value(A) + float(np.sum(self.lam * A)) + self.const

    def grad(self, A):
        return self.base.grad(A) + self.lam

    def score_grad(self, A):
        return self.base.score_grad(A)

    def pattern(self, A):
        return self.base.pattern(A)


def toy_head_model(seed: int = 0) -> Model:
    """5x5 input -> conv(2, 3x3) -> relu [2 maps of 3x3] -> conv(3, 2x2) -> relu -> dense(4)."""
    layers = [conv2d(2, 1, 3, 3, 1, 0), relu(), conv2d(3, 2, 2, 2, 1, 0), relu(), flatten(), dense(4, 12)]
    return Model(layers, seeded_params(layers, seed), (1, 5, 5), precision=64)


def toy_head(seed: int = 0, score: str = "exp") -> ModelHead:
    """Audit head on the 2-map 3x3 layer of ``toy_head_model(seed)``, argmax class."""
    return ModelHead(toy_head_model(seed), synthetic_image(seed, (1, 5, 5)), 1, None, score)


# finite-difference helpers --------------------------------------------------------

def _bump(A, unit, delta):
    B = A.copy()
    B[unit] += delta
    return B


def _safe_step(head, A, unit, rel_step):
    """Largest step (from ``rel_step * max(1, |A|)`` down) whose stencil stays on one linear piece."""
    h = rel_step * max(1.0, abs(float(A[unit])))
    center = head.pattern(A)
    for _ in range(MAX_STEP_SHRINKS):
        if head.pattern(_bump(A, unit, h)) == center and head.pattern(_bump(A, unit, -h)) == center:
            return h
        h /= 10
    raise KinkError(f"unit {unit} sits on a kink at every step down to {h * 10:g}")


def probe_order(shape, seed: int):
    """Yield every unit of ``shape`` once, in an order drawn with SplitMix64(seed)."""
    total = math.prod(shape)
    gen = SplitMix64(seed)
    seen: set[int] = set()
    while len(seen) < total:
        i = gen.below(total)
        if i not in seen:
            seen.add(i)
            yield tuple(int(v) for v in np.unravel_index(i, shape))


def select_probes(shape, n: int, seed: int) -> list[tuple[int, ...]]:
    """``n`` distinct units of ``shape`` drawn with SplitMix64(seed)."""
    return list(itertools.islice(probe_order(shape, seed), n))


def _check_finite(unit, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DerivCheckError(f"non-finite intermediate at probe {unit}")


# corrected derivative identity ----------------------------------------------------

@dataclass
class IdentityCheckResult:
    unit: tuple[int, int, int]
    lhs: float
    rhs_corrected: float
    rhs_shortened: float
    rel_residual_corrected: float
    rel_residual_shortened: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_residual_corrected < self.tolerance


def frozen_alphas(head, lam: float = 1.0) -> np.ndarray:
    """Grad-CAM++ alphas at the head's base point, to be held constant."""
    A = head.activations
    return alpha_stable(head.score_grad(A), A, lam).values


def check_corrected_derivative(head, alphas=None, probes=None, n_probes: int = 8, seed: int = 0,
                               tolerance: float = 1e-5) -> list[IdentityCheckResult]:
    """Compare a finite-difference derivative of the pooled reconstruction with both closed forms.

    ``lhs`` is a central difference of ``F``.  The corrected right-hand side
    uses backprop first derivatives and mixed second derivatives from central
    differences of the backprop gradient.  The shortened form keeps only the
    probed unit's own second derivative.
    """
    A = head.activations
    alphas = frozen_alphas(head) if alphas is None else np.asarray(alphas, dtype=np.float64)
    if alphas.shape != A.shape:
        raise ValueError(f"alphas {alphas.shape} do not match activations {A.shape}")
    if probes is None:
        # drawn probes that sit on a kink are replaced by the next unit in the same order
        candidates, wanted = probe_order(A.shape, seed), n_probes
    else:
        candidates = [tuple(p) for p in probes]
        wanted = len(candidates)
    sums = A.sum(axis=(1, 2))
    g0 = head.grad(A)

    def pooled(B):
        g = head.grad(B)
        return float(np.sum((alphas * g).sum(axis=(1, 2)) * B.sum(axis=(1, 2))))

    out = []
    for unit in candidates:
        if len(out) == wanted:
            break
        k = unit[0]
        try:
            h1 = _safe_step(head, A, unit, FIRST_ORDER_STEP)
            h2 = _safe_step(head, A, unit, HIGHER_ORDER_STEP)
        except KinkError:
            if probes is not None:
                raise
            continue
        lhs = (pooled(_bump(A, unit, h1)) - pooled(_bump(A, unit, -h1))) / (2 * h1)
        hess_row = (head.grad(_bump(A, unit, h2)) - head.grad(_bump(A, unit, -h2))) / (2 * h2)
        first = float(np.sum(alphas[k] * g0[k]))
        rhs_c = first + float(np.sum(sums * (alphas * hess_row).sum(axis=(1, 2))))
        rhs_s = first + float(sums[k] * alphas[unit] * hess_row[unit])
        _check_finite(unit, lhs, rhs_c, rhs_s)
        scale = max(1e-8, abs(lhs))
        out.append(IdentityCheckResult(unit, lhs, rhs_c, rhs_s, abs(lhs - rhs_c) / scale,
                                       abs(lhs - rhs_s) / scale, tolerance))
    return out


# beta family -------------------------------------------------------------------------

@dataclass
class BetaFamily:
    betas: np.ndarray
    coefficients: np.ndarray
    alphas: np.ndarray
    normalizer: float
    y: float
    redraws: int

    @property
    def residual(self) -> float:
        return abs(float(np.sum(self.coefficients * self.alphas)) - self.y) / max(abs(self.y), 1e-300)


def pooling_coefficients(head, use_relu: bool = False) -> np.ndarray:
    """``C[k,a,b] = dY/dA[k,a,b] * sum(A[k])`` (gradient clipped at zero if ``use_relu``)."""
    A = head.activations
    g = head.grad(A)
    if use_relu:
        g = np.maximum(g, 0)
    return g * A.sum(axis=(1, 2), keepdims=True)


def construct_beta_family(head, seed: int, use_relu: bool = False, max_redraws: int = 100) -> BetaFamily:
    """One member of the solution family ``alpha = beta * Y / sum(C * beta)``, betas in [-1, 1]."""
    A = head.activations
    C = pooling_coefficients(head, use_relu)
    y = head.value(A)
    gen = SplitMix64(seed)
    for attempt in range(max_redraws):
        betas = np.array(gen.uniforms(A.size, -1.0, 1.0)).reshape(A.shape)
        norm = float(np.sum(C * betas))
        if abs(norm) > ADMISSIBLE:
            return BetaFamily(betas, C, betas * y / norm, norm, y, attempt)
    raise DerivCheckError(f"{max_redraws} consecutive inadmissible beta draws; coefficients are ~0")


# pooling-equation residual ----------------------------------------------------------------

@dataclass
class ResidualReport:
    alpha_source: str
    y: float
    reconstruction: float
    abs_residual: float
    rel_residual: float
    overflow: bool = False
    log_y: float | None = None


def pooling_residual(head, alpha_source="stable", lam: float = 1.0, use_relu: bool = False,
                     seed: int = 0) -> ResidualReport:
    """Residual of ``Y = sum_k w_k * sum(A[k])`` with ``w_k = sum_ab alpha * dY/dA``.

    ``alpha_source`` is ``"stable"``, ``"cubic"``, ``"beta"`` or an explicit
    alpha array.  For the exp score, ``Y`` cancels from the relative residual,
    so an overflowing ``exp(S)`` still gives a finite relative residual.
    """
    A = head.activations
    if isinstance(alpha_source, str):
        name = alpha_source
        if name == "stable":
            alphas = alpha_stable(head.score_grad(A), A, lam).values
        elif name == "cubic":
            alphas = alpha_cubic(head.score_grad(A), A, lam).values
        elif name == "beta":
            alphas = construct_beta_family(head, seed, use_relu).alphas
        else:
            raise ValueError(f"unknown alpha source {name!r}")
    else:
        name = "explicit"
        alphas = np.asarray(alpha_source, dtype=np.float64)
    if alphas.shape != A.shape:
        raise ValueError(f"alphas {alphas.shape} do not match activations {A.shape}")

    y = head.value(A)
    if not math.isfinite(y) and head.score == "exp" and name != "beta":
        gs = head.score_grad(A)
        if use_relu:
            gs = np.maximum(gs, 0)
        ratio = float(np.sum(alphas * gs * A.sum(axis=(1, 2), keepdims=True)))
        return ResidualReport(name, math.inf, math.inf, math.inf, abs(ratio - 1.0), True, head.log_value(A))
    recon = float(np.sum(alphas * pooling_coefficients(head, use_relu)))
    if not (math.isfinite(y) and math.isfinite(recon)):
        return ResidualReport(name, y, recon, math.inf, math.inf, True,
                              head.log_value(A) if hasattr(head, "log_value") else None)
    err = abs(recon - y)
    return ResidualReport(name, y, recon, err, err / max(abs(y), 1e-300))


# linearity shift ---------------------------------------------------------------------------

def higher_order_alphas(head, units=None) -> np.ndarray:
    """Alphas from ``Y'' / (2 Y'' + sum(A[k]) Y''')`` with diagonal derivatives by finite differences.

    Units whose second derivative is exactly zero get 0.
    """
    A = head.activations
    g0 = head.grad(A)
    sums = A.sum(axis=(1, 2))
    out = np.zeros_like(A)
    units = list(np.ndindex(*A.shape)) if units is None else units
    for unit in units:
        h = _safe_step(head, A, unit, THIRD_ORDER_STEP)
        gp = head.grad(_bump(A, unit, h))[unit]
        gm = head.grad(_bump(A, unit, -h))[unit]
        d2 = (gp - gm) / (2 * h)
        d3 = (gp - 2 * g0[unit] + gm) / (h * h)
        if d2 != 0:
            out[unit] = d2 / (2 * d2 + sums[unit[0]] * d3)
    return out


@dataclass
class ShiftReport:
    max_alpha_change: float
    y_base: float
    y_shifted: float
    reconstruction_base: float
    reconstruction_shifted: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return (self.max_alpha_change <= self.tolerance
                and self.y_base != self.y_shifted
                and self.reconstruction_base != self.reconstruction_shifted)


def linearity_shift_check(head, seed: int = 0, tolerance: float = 1e-4) -> ShiftReport:
    """Add ``sum(lam * A) + C`` (seeded, entries in [-1, 1]) to ``Y`` and recompute everything."""
    A = head.activations
    gen = SplitMix64(seed)
    lam = np.array(gen.uniforms(A.size, -1.0, 1.0)).reshape(A.shape)
    const = gen.uniform() * 2 - 1
    shifted = ShiftedHead(head, lam, const)

    def pooled(h, alphas):
        return float(np.sum(alphas * pooling_coefficients(h)))

    a0 = higher_order_alphas(head)
    a1 = higher_order_alphas(shifted)
    return ShiftReport(float(np.max(np.abs(a1 - a0))), head.value(A), shifted.value(A),
                       pooled(head, a0), pooled(shifted, a1), tolerance)


# lambda sweep ---------------------------------------------------------------------------------

@dataclass
class LambdaSummary:
    lam: float
    min_nonzero: float | None
    max_nonzero: float | None
    mean_nonzero: float | None
    zero_count: int
    max_change_from_previous: float | None
    alphas: np.ndarray


def lambda_sweep(head, lambdas) -> list[LambdaSummary]:
    """Stable-form alphas ``1 / (2 + lam * g * sum(A))`` for each ``lam``."""
    A = head.activations
    g = head.score_grad(A)
    out, prev = [], None
    for lam in lambdas:
        if not lam > 0:
            raise ValueError("lambda values must be positive")
        f = alpha_stable(g, A, lam)
        nz = f.values[f.values != 0]
        out.append(LambdaSummary(float(lam), f.min_nonzero, f.max_nonzero,
                                 float(nz.mean()) if nz.size else None, f.zero_gradient_count,
                                 None if prev is None else float(np.max(np.abs(f.values - prev))), f.values))
        prev = f.values
    return out


# audit -------------------------------------------------------------------------------------

def shift_tractable(shape) -> bool:
    return len(shape) == 3 and all(n <= m for n, m in zip(shape, SHIFT_TRACTABLE_SHAPE))


def run_audit(head, seed: int = 0, n_probes: int = 8, families: int = 100) -> dict:
    """Run every check on one head and return a JSON-ready report with pass/fail per check."""
    checks = []

    ident = check_corrected_derivative(head, n_probes=n_probes, seed=seed)
    # the two closed forms can only be told apart where their cross terms exceed the tolerance
    telling = [r for r in ident if abs(r.rel_residual_shortened - r.rel_residual_corrected) > r.tolerance]
    larger = sum(r.rel_residual_shortened > r.rel_residual_corrected for r in telling)
    checks.append({
        "name": "corrected_derivative",
        "tolerance": ident[0].tolerance if ident else None,
        "passed": bool(ident) and all(r.passed for r in ident) and 2 * larger >= len(telling),
        "discriminating_probes": len(telling),
        "shortened_form_larger": larger,
        "probes": [{**asdict(r), "unit": list(r.unit)} for r in ident],
    })

    fams = [construct_beta_family(head, seed * 1000 + i) for i in range(families)]
    worst = max(f.residual for f in fams)
    distinct = all(np.max(np.abs(a.alphas - b.alphas)) > 0 for a, b in itertools.combinations(fams, 2))
    checks.append({"name": "beta_family", "tolerance": ADMISSIBLE, "families": families,
                   "max_residual": worst, "pairwise_distinct": distinct,
                   "passed": worst < ADMISSIBLE and distinct})

    res = {src: pooling_residual(head, src, seed=seed) for src in ("stable", "cubic", "beta")}
    checks.append({"name": "pooling_residual", "tolerance": ADMISSIBLE,
                   "residuals": {k: asdict(v) for k, v in res.items()},
                   "passed": res["beta"].rel_residual < ADMISSIBLE
                   and res["stable"].rel_residual > res["beta"].rel_residual})

    # third differences are only resolvable on very small layers; elsewhere report, don't gate
    tractable = shift_tractable(head.activations.shape)
    try:
        shift = linearity_shift_check(head, seed)
        entry = {**asdict(shift), "passed": shift.passed}
    except KinkError as exc:
        if tractable:
            raise
        entry = {"passed": False, "error": str(exc)}
    entry["asserted"] = tractable
    if not tractable:
        entry["reason"] = f"layer {list(head.activations.shape)} exceeds {list(SHIFT_TRACTABLE_SHAPE)}"
    checks.append({"name": "linearity_shift", **entry})

    sweep = lambda_sweep(head, [1.0, 2.0])
    g = head.score_grad(head.activations)
    terms = g * head.activations.sum(axis=(1, 2), keepdims=True)
    nz = g != 0
    closed = all(np.array_equal(s.alphas[nz], 1 / (2 + s.lam * terms[nz])) for s in sweep)
    checks.append({"name": "lambda_sensitivity", "lambdas": [s.lam for s in sweep],
                   "max_change": sweep[1].max_change_from_previous, "closed_form_exact": closed,
                   "passed": closed and bool((sweep[1].max_change_from_previous or 0) > 0)})

    stable = alpha_stable(g, head.activations).values
    cubic = alpha_cubic(g, head.activations).values
    rel = float(np.max(np.abs(cubic[nz] - stable[nz]) / np.abs(stable[nz]))) if nz.any() else 0.0
    checks.append({"name": "cubic_vs_stable", "tolerance": 1e-10, "max_rel_diff": rel, "passed": rel < 1e-10})

    return {
        "layer_shape": list(head.activations.shape),
        "score": head.score,
        "seed": seed,
        "passed": all(c["passed"] for c in checks if c.get("asserted", True)),
        "checks": checks,
    }
