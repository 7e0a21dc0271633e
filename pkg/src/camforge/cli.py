"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 a numerical
check exceeded its tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import derivcheck
from .cam import METHODS, AttributionRequest, attribute
from .evalharness import (EmptyDatasetError, alpha_statistics, evaluate_dataset, pairwise_reports, write_report)
from .nn import CamfError, ScoreSpec, forward, generate_toy_model, load_model, save_model
from .postproc import NetpbmError, explanation_map, read_image, synthetic_image, to_image_size, write_image, write_overlay
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("camforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _nonnegative(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def _class_arg(text):
    if text == "argmax":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or 'argmax'") from None


def _add_attr_args(p):
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, help="layer index (default: last feature-map layer)")
    p.add_argument("--class", dest="class_index", type=_class_arg, default="argmax")
    p.add_argument("--method", choices=METHODS, default="gradcam-pp")
    p.add_argument("--score", choices=("pre", "post"), default="pre")
    p.add_argument("--lambda", dest="lam", type=_positive, default=1.0)
    p.add_argument("--alpha-eps", type=_nonnegative, default=0.0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--out", required=True, help="normalized heatmap (PGM)")
    p.add_argument("--overlay", help="colormap overlay (PPM)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-model", help="write a seeded toy model")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--arch", choices=("tiny", "small"), default="tiny")
    p.add_argument("--input-shape", type=int, nargs=3, default=(1, 16, 16), metavar=("C", "H", "W"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("attribute", help="write a normalized, upsampled heatmap")
    _add_attr_args(p)

    p = sub.add_parser("explain", help="attribute, then write and score the explanation map")
    _add_attr_args(p)
    p.add_argument("--explanation", required=True, help="explanation map (PGM/PPM)")

    p = sub.add_parser("evaluate", help="relative performance over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--confidence", type=float, default=0.5)
    p.add_argument("--score", choices=("pre", "post"), default="pre")
    p.add_argument("--layer", type=int)
    p.add_argument("--lambda", dest="lam", type=_positive, default=1.0)
    p.add_argument("--alpha-eps", type=_nonnegative, default=0.0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("json", "csv"))

    p = sub.add_parser("alpha-stats", help="Grad-CAM++ alpha distribution over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--lambda", dest="lam", type=_positive, default=1.0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"))

    p = sub.add_parser("check-grad", help="backprop versus central finite differences")
    p.add_argument("--model", required=True)
    p.add_argument("--tol", type=_positive, default=1e-4)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=_positive, default=1e-3)
    p.add_argument("--out", help="JSON report")

    p = sub.add_parser("check-derivation", help="finite-difference audit of the alpha derivation")
    p.add_argument("--model", help="audit this model instead of the built-in 2-map 3x3 head")
    p.add_argument("--layer", type=int)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--probes", type=int, default=8)
    p.add_argument("--families", type=int, default=100)
    p.add_argument("--out", required=True)
    return parser


def _load(args):
    return load_model(args.model, precision=args.precision)


def _resolve_layer(model, layer):
    if layer is None:
        return model.last_spatial_layer()
    if not 0 <= layer < len(model.layers) or len(model.shapes[layer]) != 3:
        raise UsageError(f"--layer {layer} is not a feature-map layer; choose from {model.spatial_layers()}")
    return layer


def _attribute(args):
    model = _load(args)
    image = read_image(args.image)
    if image.shape != model.input_shape:
        raise UsageError(f"image shape {list(image.shape)} does not match model input {list(model.input_shape)}")
    trace = forward(model, image)
    c = int(np.argmax(trace.pre_softmax)) if args.class_index == "argmax" else args.class_index
    if not 0 <= c < model.class_count:
        raise UsageError(f"--class {c} out of range [0, {model.class_count})")
    req = AttributionRequest(args.method, _resolve_layer(model, args.layer), ScoreSpec(c, args.score),
                             lam=args.lam, alpha_eps=args.alpha_eps)
    raw = attribute(model, image, req)
    heat = to_image_size(raw, image.shape)
    write_image(heat.values, args.out)
    if args.overlay:
        write_overlay(heat, image, args.overlay)
    if raw.alphas is not None and raw.alphas.nonfinite_units:
        log.warning("%d alphas are non-finite", len(raw.alphas.nonfinite_units))
    if heat.degenerate:
        log.warning("heatmap is constant; normalized to zeros")
    return model, image, heat, c


def cmd_gen_model(args):
    save_model(generate_toy_model(args.seed, args.arch, tuple(args.input_shape)), args.out)
    return EXIT_OK


def cmd_attribute(args):
    _attribute(args)
    return EXIT_OK


def cmd_explain(args):
    model, image, heat, c = _attribute(args)
    expl = explanation_map(heat, image)
    write_image(expl, args.explanation)
    score = float(forward(model, expl).post_softmax[c])
    print(f"class {c}: post-softmax score {score:.17g} on the explanation map")
    return EXIT_OK


def cmd_evaluate(args):
    model = _load(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or len(methods) < 2:
        raise UsageError(f"--methods needs at least two of {METHODS}; got {methods}")
    records = evaluate_dataset(model, args.dataset, methods, args.score, args.confidence,
                               _resolve_layer(model, args.layer), lam=args.lam, alpha_eps=args.alpha_eps)
    reports = pairwise_reports(records, methods, confidence=args.confidence, score_mode=args.score)
    write_report(reports, args.report, args.format)
    for r in reports:
        print(f"{r.method_prime} vs {r.method}: relative performance {r.relative_performance:.6g} "
              f"(log mean {r.log_mean:.6g}, std {r.log_std:.6g}, n={r.sample_count})")
    return EXIT_OK


def cmd_alpha_stats(args):
    model = _load(args)
    stats = alpha_statistics(model, args.dataset, _resolve_layer(model, args.layer), lam=args.lam)
    write_report(stats, args.out, args.format)
    print(f"alphas: {stats.nonzero_count} nonzero, {stats.zero_count} zero; "
          f"quartiles {stats.q1}, {stats.median}, {stats.q3}; raw range [{stats.raw_min}, {stats.raw_max}]")
    return EXIT_OK


def cmd_check_grad(args):
    model = load_model(args.model)
    t0 = time.perf_counter()
    report = derivcheck.gradient_check(model, args.probes, args.seed, args.step)
    report["seconds"] = time.perf_counter() - t0
    report["tolerance"] = args.tol
    report["passed"] = report["max_rel_error"] < args.tol
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    print(f"{len(report['probes'])} probes, max relative error {report['max_rel_error']:.3g} "
          f"(tolerance {args.tol:g}), {report['replaced_at_kinks']} kink replacements, "
          f"{report['seconds']:.2f}s: {'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


def cmd_check_derivation(args):
    if args.model:
        model = load_model(args.model, precision=64)
        layer = _resolve_layer(model, args.layer)
        head = derivcheck.ModelHead(model, synthetic_image(args.seed, model.input_shape), layer)
    else:
        head = derivcheck.toy_head(args.seed)
    report = derivcheck.run_audit(head, args.seed, args.probes, args.families)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, default=float)
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        if not c.get("asserted", True):
            status += f" (not asserted: {c['reason']})"
        print(f"{c['name']}: {status}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


COMMANDS = {
    "gen-model": cmd_gen_model,
    "attribute": cmd_attribute,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "alpha-stats": cmd_alpha_stats,
    "check-grad": cmd_check_grad,
    "check-derivation": cmd_check_derivation,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CamfError, NetpbmError, EmptyDatasetError, ShapeError) as exc:
        print(f"camforge: {exc}", file=sys.stderr)
        return EXIT_IO
    except derivcheck.DerivCheckError as exc:
        print(f"camforge: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
