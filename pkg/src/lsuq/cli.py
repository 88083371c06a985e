"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
3 singular confusion matrix, 4 missing class weight.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
import warnings

import numpy as np

from . import __version__
from .calibration import (
    FIXED_WIDTH,
    UNIFORM_MASS,
    BadInputsError,
    DegenerateOutputsError,
    TooFewPointsError,
    bin_frequencies_from_probs,
    epsilon_bounds,
    fit_binning,
    reliability_from_probs,
    reweight_bins,
    target_miscalibration_bound,
)
from .conformal import (
    Mode,
    calibrate_label_conditional,
    calibrate_standard,
    calibrate_weighted,
    predict_sets,
)
from .core import LabelShiftError, RngStream
from .io import FileFormatError, dump_weights, load_config, read_predictions, read_weights, write_results
from .scores import ScoreScheme, draw_u, scores_from_probs
from .shift import SingularMatrixError, estimate_weights
from .sim import run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_SINGULAR, EXIT_MISSING_WEIGHTS = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class MissingWeightsError(Exception):
    pass


def _json_num(x):
    x = float(x)
    return None if not np.isfinite(x) else x


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _report(args, payload: dict, path=None):
    text = json.dumps(payload, indent=2)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    elif not args.quiet:
        print(text, file=sys.stderr)


def _read(path, require_labels=False):
    try:
        return read_predictions(path, require_labels=require_labels)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except FileFormatError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"no such config file: {args.config}") from None
    except FileFormatError as exc:
        raise UsageError(str(exc)) from None
    overrides = {k: getattr(args, k) for k in ("replications", "seed", "workers")
                 if getattr(args, k) is not None}
    if overrides:
        from dataclasses import asdict

        try:
            cfg = type(cfg).from_mapping({**asdict(cfg), **overrides})
        except LabelShiftError as exc:
            raise UsageError(str(exc)) from None
    rows = run_experiment(cfg)
    with _output(args.out) as fh:
        write_results(rows, fh)
    failed = sum(1 for r in rows if r.error)
    if failed and not args.quiet:
        print(f"warning: {failed} method-replications failed (see 'error' column)", file=sys.stderr)
    return EXIT_OK


def cmd_estimate_weights(args) -> int:
    src = _read(args.source, require_labels=True)
    tgt = _read(args.target)
    if src.class_count != tgt.class_count:
        raise UsageError(f"source has K={src.class_count}, target has K={tgt.class_count}")
    if len(src) == 0 or len(tgt) == 0:
        raise UsageError("source and target files must be nonempty")
    res = estimate_weights(src.probs, src.labels, tgt.probs, soft=not args.hard,
                           clip_floor=args.clip_floor)
    with _output(args.out) as fh:
        fh.write(dump_weights(res.weights) + "\n")
    _report(args, {
        "estimator": "bbse-hard" if args.hard else "bbse-soft",
        "condition_estimate": res.condition,
        "unclipped": [float(v) for v in res.raw],
        "clipped_classes": [int(k) + 1 for k in res.clipped],
    })
    return EXIT_OK


def _class_weights(path, K):
    try:
        w = read_weights(path)
    except FileNotFoundError:
        raise UsageError(f"no such weights file: {path}") from None
    if w.size < K:
        raise MissingWeightsError(f"{path}: {w.size} weights for {K} classes")
    if w.size > K:
        raise UsageError(f"{path}: {w.size} weights for {K} classes")
    return w


def cmd_conformal(args) -> int:
    mode = Mode(args.mode)
    if mode is Mode.WEIGHTED and not args.weights:
        raise UsageError("--mode weighted requires --weights")
    if mode is not Mode.WEIGHTED and args.weights:
        raise UsageError("--weights is only meaningful with --mode weighted")
    cal = _read(args.calib, require_labels=True)
    test = _read(args.test)
    K = cal.class_count
    if test.class_count != K:
        raise UsageError(f"calibration has K={K}, test has K={test.class_count}")
    if len(cal) == 0:
        raise UsageError("calibration file has no rows")
    scheme = ScoreScheme.parse(args.scheme)
    scores = scores_from_probs(cal.probs, cal.labels, scheme,
                               draw_u(len(cal), scheme, RngStream(args.seed, 0)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if mode is Mode.STANDARD:
            model = calibrate_standard(scores, args.alpha, scheme, args.force_top)
        elif mode is Mode.WEIGHTED:
            model = calibrate_weighted(scores, _class_weights(args.weights, K), args.alpha,
                                       scheme, args.force_top)
        else:
            model = calibrate_label_conditional(scores, args.alpha, K, scheme, args.force_top)
    if not args.quiet:
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    u = draw_u(len(test), scheme, RngStream(args.seed, 1))
    member = predict_sets(model, test.probs, u) if len(test) else np.zeros((0, K), dtype=bool)
    has_labels = test.labels is not None
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "set", "size"] + (["covered"] if has_labels else []))
        for i, pid in enumerate(test.ids):
            labels = np.flatnonzero(member[i])
            row = [pid, ";".join(str(k + 1) for k in labels), str(labels.size)]
            if has_labels:
                row.append(str(int(member[i, test.labels[i]])))
            w.writerow(row)
    summary = {
        "mode": mode.value,
        "scheme": scheme.value,
        "alpha": args.alpha,
        "n_calibration": len(cal),
        "n_test": len(test),
        "thresholds": [float(t) for t in model.threshold_vector(K)],
        "mean_size": _json_num(member.sum(axis=1).mean()) if len(test) else None,
    }
    if has_labels and len(test):
        covered = member[np.arange(len(test)), test.labels]
        summary["coverage"] = float(covered.mean())
        counts = np.bincount(test.labels, minlength=K)
        hits = np.bincount(test.labels, weights=covered, minlength=K)
        summary["per_class_coverage"] = [_json_num(h / c) if c else None for h, c in zip(hits, counts)]
    _report(args, summary, args.summary)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cal = _read(args.calib, require_labels=True)
    test = _read(args.test, require_labels=True)
    K = cal.class_count
    if test.class_count != K:
        raise UsageError(f"calibration has K={K}, test has K={test.class_count}")
    if args.true_weights and not args.weights:
        raise UsageError("--true-weights needs --weights")
    projection = args.projection or ("positive" if K == 2 else None)
    if projection is None:
        raise UsageError(f"K={K}: choose --projection top (or grid for small K)")
    mode = FIXED_WIDTH if projection == "grid" else args.binning
    try:
        scheme = fit_binning(cal.probs, args.bins, mode, projection, args.positive_class - 1)
    except (TooFewPointsError, DegenerateOutputsError, BadInputsError) as exc:
        raise UsageError(str(exc)) from None
    calib = bin_frequencies_from_probs(cal.probs, cal.labels, scheme)
    use_rw = bool(args.weights)
    if use_rw:
        calib = reweight_bins(calib, _class_weights(args.weights, K))
    report = reliability_from_probs(calib, test.probs, test.labels, use_reweighted=use_rw)
    eps = epsilon_bounds(calib, args.alpha)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_index", "lower_edge", "upper_edge", "predicted", "observed", "count",
                    "cal_count", "epsilon"])
        for b in report.bins:
            w.writerow([b.bin_index, repr(b.lower_edge), repr(b.upper_edge), repr(b.predicted),
                        repr(b.observed), b.count, int(calib.counts[b.bin_index]),
                        repr(float(eps[b.bin_index]))])
    eps_max = float(np.nanmax(eps))
    cert = {
        "alpha": args.alpha,
        "bins": scheme.n_bins,
        "class_count": K,
        "epsilon": [_json_num(e) for e in eps],
        "epsilon_max": eps_max,
        "ece": _json_num(report.ece),
        "max_l1_deviation": _json_num(report.max_l1),
        "reweighted": use_rw,
        "calibrator": calib.to_dict(),
    }
    if use_rw:
        cert["ece_uncorrected"] = _json_num(
            reliability_from_probs(calib, test.probs, test.labels, use_reweighted=False).ece)
    if args.true_weights:
        w_true = _class_weights(args.true_weights, K)
        cert["target_bound"] = target_miscalibration_bound(eps_max, calib.weights, w_true)
    _report(args, cert, args.certificate)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (u64)")
    common.add_argument("--out", default=None, help="write the main output here instead of stdout")
    common.add_argument("--quiet", action="store_true", help="suppress diagnostics on stderr")

    parser = argparse.ArgumentParser(
        prog="lsuq", description="Conformal prediction and calibration under label shift.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo experiment")
    p.add_argument("config", help="flat TOML experiment config")
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-weights", parents=[common], help="BBSE importance weights")
    p.add_argument("--source", required=True, help="labelled source predictions")
    p.add_argument("--target", required=True, help="target predictions (labels ignored)")
    p.add_argument("--hard", action="store_true", help="use argmax predictions (BBSE-hard)")
    p.add_argument("--clip-floor", type=float, default=0.0)
    p.set_defaults(func=cmd_estimate_weights)

    p = sub.add_parser("conformal", parents=[common], help="conformal prediction sets")
    p.add_argument("--calib", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="standard")
    p.add_argument("--weights", default=None, help="JSON array of class weights")
    p.add_argument("--scheme", default="randomized",
                   choices=[s.value for s in ScoreScheme] + ["0", "1", "2"])
    p.add_argument("--force-top", action="store_true", help="always include the most likely label")
    p.add_argument("--summary", default=None, help="write the summary JSON here")
    p.set_defaults(func=cmd_conformal)

    p = sub.add_parser("calibrate", parents=[common], help="calibration by binning")
    p.add_argument("--calib", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--binning", choices=[UNIFORM_MASS, FIXED_WIDTH], default=UNIFORM_MASS)
    p.add_argument("--projection", choices=["positive", "top", "grid"], default=None)
    p.add_argument("--positive-class", type=int, default=2, help="1-based positive class for K=2")
    p.add_argument("--weights", default=None, help="weights used to reweight the bins")
    p.add_argument("--true-weights", default=None, help="true weights, enables the target bound")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--certificate", default=None, help="write the certificate JSON here")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and args.command != "simulate":
        args.seed = 0
    if getattr(args, "alpha", None) is not None and not 0 < args.alpha < 1:
        parser.error("--alpha must lie in (0, 1)")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lsuq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingWeightsError as exc:
        print(f"lsuq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_MISSING_WEIGHTS
    except FileFormatError as exc:
        print(f"lsuq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SingularMatrixError as exc:
        print(f"lsuq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (LabelShiftError, OSError) as exc:
        print(f"lsuq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
