"""Command-line entry point: simulate, track, eval, sweep, fitcov.

Log verbosity comes from ``POSEFG_LOG`` (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import records, sim
from .evaluation import EvaluationError, precision_recall
from .factors import fit_sigma_model
from .pipeline import StreamError, check_aligned, pick_presets, run_tracker, sweep

log = logging.getLogger("posefg")


class CommandError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("POSEFG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_models(path):
    return records.models_from_dict(records.read_json(path))


# -- commands -------------------------------------------------------------------


def cmd_make_scene(args):
    maker = sim.make_static_scene if args.kind == "static" else sim.make_dynamic_scene
    sc = maker(args.n_objects, seed=args.seed, duration=args.duration, fps=args.fps)
    records.write_json(args.output, records.scenario_to_dict(sc))


def cmd_simulate(args):
    scenario = records.scenario_from_dict(records.read_json(args.scenario))
    truth, frames = sim.generate(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records.write_jsonl(out / "frames.jsonl", [records.frame_to_dict(f) for f in frames])
    records.write_jsonl(out / "truth.jsonl", [records.truth_to_dict(t) for t in truth])
    records.write_jsonl(out / "errors.jsonl", sim.detection_errors(truth, frames))
    records.write_json(out / "models.json", records.models_to_dict(scenario.models(), scenario.intrinsics))
    log.info("wrote %d frames to %s", len(frames), out)


def _tracker_config(args, models=None):
    raw = records.read_json(args.config) if args.config else {}
    cfg = records.tracker_config_from_dict(
        raw, motion_model=args.motion, window_mode=args.window_mode, horizon=args.horizon, preset=args.preset
    )
    if models:
        radii = {m.label: 0.5 * m.diameter for m in models}
        radii.update(cfg.radii)
        cfg.radii = radii
    return cfg


def cmd_track(args):
    models = _load_models(args.models)[0] if args.models else None
    cfg = _tracker_config(args, models)
    frames = records.load_frames(args.frames)
    run = run_tracker(frames, cfg)
    records.write_jsonl(args.output, run.batches)
    if run.wall_times:
        w = np.array(run.wall_times) * 1e3
        log.info("per-frame wall time: median %.1f ms, p99 %.1f ms, max %.1f ms", np.median(w), np.percentile(w, 99), w.max())


def cmd_baseline(args):
    frames = records.load_frames(args.frames)
    batches = []
    for k, f in enumerate(frames):
        preds = [{"label": d.label, "pose": (f.camera @ d.pose).to_dict()} for d in f.detections]
        batches.append({"frame": k, "timestamp": f.timestamp, "predictions": preds})
    records.write_jsonl(args.output, batches)


def _write_curves(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "threshold", "recall", "precision"])
        for m, t, r, p in report.curve:
            w.writerow([m, repr(float(t)), repr(r), repr(p)])


def cmd_eval(args):
    preds = records.predictions_from_batches(records.read_jsonl(args.predictions))
    truth = [t.as_eval() for t in records.load_truth(args.truth)]
    models, intr = _load_models(args.models)
    check_aligned(preds, truth)
    report = precision_recall(preds, truth, models, intr)
    records.write_json(args.output, report.to_dict())
    if args.curves:
        _write_curves(args.curves, report)
    print(f"recall {report.recall:.4f}  precision {report.precision:.4f}  (MSSD+MSPD average, no VSD)")


def cmd_sweep(args):
    models, intr = _load_models(args.models)
    cfg = _tracker_config(args, models)
    frames = records.load_frames(args.frames)
    truth = records.load_truth(args.truth)
    rows = sweep(frames, truth, models, cfg, args.tau_t, args.tau_r, args.motion_scale, intr)
    with open(args.output, "w", newline="") as fh:
        cols = ["tau_pred_t", "tau_pred_r", "motion_scale", "recall", "precision", "pareto"]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else str(r[c]).lower() for c in cols])
    if args.baseline:
        raw = records.predictions_from_batches(records.read_jsonl(args.baseline))
        base = precision_recall(raw, [t.as_eval() for t in truth], models, intr)
        rec, prec = pick_presets(rows, base.precision, base.recall)
        for name, row in (("recall-oriented", rec), ("precision-oriented", prec)):
            print(f"{name}: {row}")


def cmd_fitcov(args):
    recs = records.read_jsonl(args.errors)
    if not recs:
        raise CommandError(f"{args.errors}: no error records (insufficient data)")
    samples = records.error_samples(recs)
    out, notes = {}, []
    for key in ("xy", "z", "rot"):
        if len(samples[key]) < 2:
            raise CommandError(f"{args.errors}: fewer than two '{key}' samples (insufficient data)")
        fit = fit_sigma_model(samples[key], n_bins=args.bins)
        out[key] = {"a": fit.a, "b": fit.b}
        if fit.fallback:
            notes.append(f"{key}: fewer than two usable pixel-count bins or non-decaying errors; b=0 and a=pooled RMS")
    params = {**out, "decoupled": True, "visibility_dependent": True, "ray_aligned": True, "notes": notes}
    records.write_json(args.output, params)
    for n in notes:
        print(n)


# -- argument parsing -----------------------------------------------------------


def _add_tracker_args(p):
    p.add_argument("--config", help="tracker config JSON")
    p.add_argument("--motion", choices=["const_pose", "const_vel"])
    p.add_argument("--window-mode", choices=["prior", "delete"])
    p.add_argument("--horizon", type=float, help="fixed-lag horizon in seconds")
    p.add_argument("--preset", choices=list(records.PRESET_NAMES))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posefg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="write a generated scenario JSON")
    p.add_argument("kind", choices=["static", "dynamic"])
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-objects", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("simulate", help="scenario JSON -> frames/truth/models/errors")
    p.add_argument("scenario")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="frames JSONL -> predictions JSONL")
    p.add_argument("frames")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--models", help="models JSON (bounding-sphere radii)")
    _add_tracker_args(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("baseline", help="raw detections as predictions")
    p.add_argument("frames")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("predictions")
    p.add_argument("truth")
    p.add_argument("models")
    p.add_argument("-o", "--output", required=True, help="report JSON")
    p.add_argument("--curves", help="per-threshold CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="precision/recall over a gate and motion-noise grid")
    p.add_argument("frames")
    p.add_argument("truth")
    p.add_argument("models")
    p.add_argument("-o", "--output", required=True, help="pr_curve.csv")
    p.add_argument("--tau-t", type=_floats, default=[3e-7, 1e-6, 3e-6, 1e-5, 3e-5])
    p.add_argument("--tau-r", type=_floats, default=[1e-4, 3e-4, 1e-3, 3e-3])
    p.add_argument("--motion-scale", type=_floats, default=[1.0])
    p.add_argument("--baseline", help="baseline predictions JSONL; prints the preset picks")
    _add_tracker_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fitcov", help="fit the pixel-count noise model to error records")
    p.add_argument("errors")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_fitcov)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (records.SchemaError, StreamError, EvaluationError, CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
