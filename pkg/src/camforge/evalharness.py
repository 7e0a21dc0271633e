"""Dataset evaluation: explanation-map scores, relative performance, alpha statistics.

A dataset is a directory of PGM/PPM images plus ``index.csv`` with rows
``filename,label`` (header optional, label may be blank).  For each image
whose post-softmax score for its class exceeds the confidence threshold,
every method's heatmap is normalized, upsampled, multiplied into the image,
and the product is fed back through the model; the resulting post-softmax
score is the method's output for that image.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cam import METHODS, AttributionRequest, alpha_stable, attribute
from .nn import Model, ScoreSpec, backward_to_layer, forward
from .postproc import NetpbmError, explanation_map, read_image, synthetic_image, to_image_size, write_image
from .tensor import ShapeError

log = logging.getLogger(__name__)

SCORE_FLOOR = 1e-12
HIST_BINS = 64
TUKEY_K = 1.5
INDEX_FILE = "index.csv"


class EmptyDatasetError(ValueError):
    """No image survived loading and confidence filtering."""


@dataclass
class EvalRecord:
    image_id: str
    class_index: int
    base_score: float
    outputs: dict[str, float]
    degenerate: dict[str, bool] = field(default_factory=dict)


@dataclass
class RelPerfReport:
    method_prime: str
    method: str
    relative_performance: float
    log_mean: float
    log_std: float
    sample_count: int
    confidence_threshold: float | None = None
    score_mode: str | None = None


@dataclass
class AlphaStats:
    q1: float | None
    median: float | None
    q3: float | None
    raw_min: float | None
    raw_max: float | None
    zero_count: int
    nonzero_count: int
    nonfinite_count: int
    outliers_removed: int
    empty: bool
    histogram: list[int]
    term_q1: float | None = None
    term_median: float | None = None
    term_q3: float | None = None
    term_min: float | None = None
    term_max: float | None = None


def worker_count() -> int:
    """Threads for per-image work, from ``CAMFORGE_THREADS`` (0 or unset means automatic)."""
    try:
        n = int(os.environ.get("CAMFORGE_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def read_index(dataset_dir) -> list[tuple[str, int | None]]:
    rows = []
    with open(Path(dataset_dir) / INDEX_FILE, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            name = row[0].strip()
            if not rows and name == "filename":
                continue
            label = row[1].strip() if len(row) > 1 else ""
            rows.append((name, int(label) if label else None))
    return rows


def method_requests(methods, layer_index: int, score: ScoreSpec, **defaults) -> dict[str, AttributionRequest]:
    """Build named requests from method names or ``{name: {field: value}}`` overrides."""
    if isinstance(methods, Mapping):
        items = methods.items()
    else:
        items = [(m, {}) for m in methods]
    out = {}
    for name, extra in items:
        kw = {"method": name, **defaults, **extra}
        if kw["method"] not in METHODS:
            raise ValueError(f"unknown method {kw['method']!r}")
        out[name] = AttributionRequest(layer_index=layer_index, score=score, **kw)
    return out


def _evaluate_one(model, path, label, requests, confidence):
    image = read_image(path)
    trace = forward(model, image)
    c = label if label is not None else int(np.argmax(trace.pre_softmax))
    if not 0 <= c < model.class_count:
        raise ValueError(f"label {c} out of range for {model.class_count} classes")
    base = float(trace.post_softmax[c])
    if not base > confidence:
        return None
    outputs, degenerate = {}, {}
    for name, req in requests.items():
        req = dataclasses.replace(req, score=ScoreSpec(c, req.score.mode))
        heat = to_image_size(attribute(model, image, req), image.shape)
        expl = explanation_map(heat, image)
        outputs[name] = float(forward(model, expl).post_softmax[c])
        degenerate[name] = heat.degenerate
    return EvalRecord(path.name, c, base, outputs, degenerate)


def evaluate_dataset(model: Model, dataset_dir, methods, score_mode: str = "pre", confidence: float = 0.5,
                     layer_index: int | None = None, threads: int | None = None,
                     **request_defaults) -> list[EvalRecord]:
    """Score each method's explanation maps on every sufficiently confident image.

    ``methods`` is a list of method names or a mapping from a label to
    request overrides, e.g. ``{"pp-const": {"method": "gradcam-pp", "alpha_override": 0.5}}``.
    Unreadable images are skipped with a warning.  Records come back sorted
    by image id.
    """
    layer = model.last_spatial_layer() if layer_index is None else layer_index
    requests = method_requests(methods, layer, ScoreSpec(0, score_mode), **request_defaults)
    root = Path(dataset_dir)
    index = read_index(root)

    def run(item):
        name, label = item
        try:
            return _evaluate_one(model, root / name, label, requests, confidence)
        except (OSError, NetpbmError, ShapeError) as exc:
            log.warning("skipping %s: %s", name, exc)
            return exc

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        results = list(pool.map(run, index))
    skipped = sum(isinstance(r, Exception) for r in results)
    records = sorted((r for r in results if isinstance(r, EvalRecord)), key=lambda r: r.image_id)
    if skipped:
        log.warning("%d of %d images skipped", skipped, len(index))
    if not records:
        raise EmptyDatasetError(f"no image in {root} passed the confidence threshold {confidence}")
    return records


def relative_performance(records: Sequence[EvalRecord], method_prime: str, method: str,
                         confidence: float | None = None, score_mode: str | None = None) -> RelPerfReport:
    """Geometric mean over images of ``O'/O``, computed as ``exp(mean(log O' - log O))``.

    Scores are floored at ``SCORE_FLOOR`` before the log.
    """
    if not records:
        raise EmptyDatasetError("no records")
    ordered = sorted(records, key=lambda r: r.image_id)
    logs = [math.log(max(r.outputs[method_prime], SCORE_FLOOR)) - math.log(max(r.outputs[method], SCORE_FLOOR))
            for r in ordered]
    n = len(logs)
    mean = math.fsum(logs) / n
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in logs) / n)
    return RelPerfReport(method_prime, method, math.exp(mean), mean, std, n, confidence, score_mode)


def pairwise_reports(records, methods: Sequence[str], **kw) -> list[RelPerfReport]:
    """Reports for every pair, later method versus earlier (``M'`` after ``M`` in ``methods``)."""
    return [relative_performance(records, b, a, **kw) for a, b in itertools.combinations(methods, 2)]


def _tukey(values: np.ndarray):
    q1, q3 = np.percentile(values, [25, 75])
    iqr = q3 - q1
    kept = values[(values >= q1 - TUKEY_K * iqr) & (values <= q3 + TUKEY_K * iqr)]
    return kept, values.size - kept.size


def summarize_alphas(alphas, terms=None) -> AlphaStats:
    """Statistics of nonzero alphas.

    Quartiles use the nonzero finite alphas left after removing points beyond
    1.5 IQR from the quartiles.  Raw min/max and the ``tanh(alpha - 0.5)``
    histogram (64 bins on [-1, 1]) keep the outliers.  ``terms`` are the
    matching ``g * sum(A)`` values, summarized the same way.
    """
    a = np.asarray(alphas, dtype=np.float64).ravel()
    zero_count = int(np.count_nonzero(a == 0))
    nz = a[a != 0]
    nonfinite = int(np.count_nonzero(~np.isfinite(nz)))
    hist = np.histogram(np.tanh(nz[~np.isnan(nz)] - 0.5), bins=HIST_BINS, range=(-1.0, 1.0))[0]
    finite = nz[np.isfinite(nz)]
    stats = AlphaStats(None, None, None, None, None, zero_count, int(nz.size), nonfinite, 0,
                       finite.size == 0, [int(x) for x in hist])
    if finite.size:
        kept, removed = _tukey(finite)
        stats.q1, stats.median, stats.q3 = (float(x) for x in np.percentile(kept, [25, 50, 75]))
        stats.raw_min, stats.raw_max = float(finite.min()), float(finite.max())
        stats.outliers_removed = int(removed)
    if terms is not None:
        t = np.asarray(terms, dtype=np.float64).ravel()
        t = t[np.isfinite(t)]
        if t.size:
            kept, _ = _tukey(t)
            stats.term_q1, stats.term_median, stats.term_q3 = (float(x) for x in np.percentile(kept, [25, 50, 75]))
            stats.term_min, stats.term_max = float(t.min()), float(t.max())
    return stats


def alpha_statistics(model: Model, images, layer_index: int | None = None, class_index: int | None = None,
                     lam: float = 1.0) -> AlphaStats:
    """Pool Grad-CAM++ alphas over images (arrays, or a dataset directory).

    Alphas come from pre-softmax gradients of the labeled class (argmax when
    unlabeled or when images are given as arrays without ``class_index``).
    """
    layer = model.last_spatial_layer() if layer_index is None else layer_index
    if isinstance(images, (str, os.PathLike)):
        root = Path(images)
        items = []
        for name, label in read_index(root):
            try:
                items.append((read_image(root / name), label))
            except (OSError, NetpbmError) as exc:
                log.warning("skipping %s: %s", name, exc)
    else:
        items = [(img, None) for img in images]
    alphas, terms = [], []
    for img, label in items:
        trace = forward(model, img)
        c = class_index if class_index is not None else label
        if c is None:
            c = int(np.argmax(trace.pre_softmax))
        g = backward_to_layer(model, trace, ScoreSpec(c, "pre"), layer)
        f = alpha_stable(g, trace.activations[layer], lam)
        alphas.append(f.values.ravel())
        terms.append(f.terms[g != 0].ravel())
    if not alphas:
        raise EmptyDatasetError("no images")
    return summarize_alphas(np.concatenate(alphas), np.concatenate(terms))


# reports -----------------------------------------------------------------------

REPORT_FORMATS = ("json", "csv")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def _rows(report):
    if isinstance(report, AlphaStats):
        d = dataclasses.asdict(report)
        hist = d.pop("histogram")
        d.update({f"bin_{i:02d}": n for i, n in enumerate(hist)})
        return [d]
    if isinstance(report, RelPerfReport):
        report = [report]
    return [dataclasses.asdict(r) for r in report]


def write_report(report, path, fmt: str | None = None) -> None:
    """Write a ``RelPerfReport`` (or a list of them) or ``AlphaStats`` as JSON or CSV.

    Fields keep their declaration order.  CSV floats use ``%.17g``; JSON
    floats use Python's shortest round-trip repr.  Both parse back bit-exact.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected json or csv")
    if fmt == "json":
        if isinstance(report, AlphaStats):
            payload = {"alpha_stats": dataclasses.asdict(report)}
        else:
            payload = {"reports": _rows(report)}
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return
    rows = _rows(report)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(rows[0].keys())
    for row in rows:
        writer.writerow(_fmt(v) for v in row.values())
    path.write_text(buf.getvalue())


def write_synthetic_dataset(dataset_dir, count: int, seed: int = 0, shape=(1, 16, 16),
                            model: Model | None = None) -> list[tuple[str, int | None]]:
    """Write ``count`` seeded blob images and an index.

    With a model, each label is the model's argmax on that image; otherwise
    labels are left blank.
    """
    root = Path(dataset_dir)
    root.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if shape[0] == 1 else "ppm"
    rows = []
    for i in range(count):
        img = synthetic_image(seed * 1_000_003 + i, shape)
        name = f"img_{i:04d}.{ext}"
        write_image(img, root / name)
        label = int(np.argmax(forward(model, img).pre_softmax)) if model is not None else None
        rows.append((name, label))
    with open(root / INDEX_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "label"])
        for name, label in rows:
            w.writerow([name, "" if label is None else label])
    return rows
