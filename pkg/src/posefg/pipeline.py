"""Stream-level drivers shared by the CLI and the test-suite."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

from . import records
from .evaluation import Intrinsics, pareto_front, precision_recall
from .tracker import OutOfOrderFrameError, Tracker, TrackerConfig, select_predictions

log = logging.getLogger(__name__)


class StreamError(ValueError):
    pass


@dataclass
class TrackRun:
    batches: list = field(default_factory=list)  # JSON-ready prediction batches
    predictions: list = field(default_factory=list)  # per frame [{label, pose}]
    candidates: list = field(default_factory=list)  # per frame, ungated (see Snapshot.candidates)
    wall_times: list = field(default_factory=list)
    n_tracks: int = 0


def run_tracker(frames, config: TrackerConfig, keep_candidates=False) -> TrackRun:
    """Feed ``frames`` through a fresh tracker, predicting at each frame time."""
    tracker = Tracker(config)
    run = TrackRun()
    for k, frame in enumerate(frames):
        t0 = time.perf_counter()
        try:
            report = tracker.ingest(frame)
        except OutOfOrderFrameError as exc:
            raise StreamError(f"frame {k}: {exc}") from None
        preds = tracker.predict(frame.timestamp)
        dt = time.perf_counter() - t0
        run.wall_times.append(dt)
        log.debug("frame %d t=%.3f tracks=%d wall=%.1f ms", k, frame.timestamp, len(tracker.tracks), dt * 1e3)
        run.batches.append(records.prediction_batch(k, frame.timestamp, preds, report))
        run.predictions.append([{"label": p.label, "pose": p.pose} for p in preds])
        if keep_candidates:
            run.candidates.append(tracker.snapshot.candidates(frame.timestamp))
    run.n_tracks = tracker._next_track
    return run


def scale_motion_noise(config: TrackerConfig, scale: float) -> TrackerConfig:
    n = config.motion_noise
    noise = replace(
        n,
        sigma_mt=n.sigma_mt * scale,
        sigma_mr=n.sigma_mr * scale,
        sigma_vt=n.sigma_vt * scale,
        sigma_vr=n.sigma_vr * scale,
    )
    return replace(config, motion_noise=noise)


def check_aligned(predictions, truth):
    if len(predictions) != len(truth):
        raise StreamError(f"stream misalignment: {len(predictions)} prediction frames vs {len(truth)} truth frames")


def sweep(frames, truth, models, config: TrackerConfig, tau_t, tau_r, motion_scales=(1.0,), intrinsics=None):
    """Precision/recall over a grid of prediction gates and motion-noise scales.

    The gates do not influence estimation, so each motion-noise setting is
    tracked once and every gate pair is applied to the stored candidates.
    Rows come back in grid order with a ``pareto`` flag.
    """
    intrinsics = intrinsics or Intrinsics()
    gt = [t.as_eval() if hasattr(t, "as_eval") else t for t in truth]
    if len(frames) != len(gt):
        raise StreamError(f"stream misalignment: {len(frames)} frames vs {len(gt)} truth frames")
    rows = []
    for scale in motion_scales:
        run = run_tracker(frames, scale_motion_noise(config, scale), keep_candidates=True)
        for t_t, t_r in itertools.product(tau_t, tau_r):
            preds = [
                [{"label": p.label, "pose": p.pose} for p in select_predictions(c, t_t, t_r, f.timestamp)]
                for c, f in zip(run.candidates, frames)
            ]
            rep = precision_recall(preds, gt, models, intrinsics)
            rows.append(
                {
                    "tau_pred_t": float(t_t),
                    "tau_pred_r": float(t_r),
                    "motion_scale": float(scale),
                    "recall": rep.recall,
                    "precision": rep.precision,
                }
            )
    front = set(pareto_front([(r["recall"], r["precision"]) for r in rows]))
    for i, r in enumerate(rows):
        r["pareto"] = i in front
    return rows


def pick_presets(rows, baseline_precision, baseline_recall=None):
    """Recall- and precision-oriented rows of a sweep.

    Recall-oriented: maximal recall with precision at least the baseline's.
    Precision-oriented: maximal precision with recall at least the baseline's
    (or any recall when no baseline recall is given). Ties go to the earlier
    grid row. Returns ``(recall_row, precision_row)``; either may be None.
    """
    ok_r = [r for r in rows if r["precision"] >= baseline_precision]
    rec = max(ok_r, key=lambda r: r["recall"], default=None)
    floor = -1.0 if baseline_recall is None else baseline_recall
    ok_p = [r for r in rows if r["recall"] >= floor]
    prec = max(ok_p, key=lambda r: r["precision"], default=None)
    return rec, prec
