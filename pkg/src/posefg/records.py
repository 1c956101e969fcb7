"""JSON / JSONL schemas for scenes, streams, configs and reports.

Every loader validates its input and raises ``SchemaError`` naming the
offending field (``objects[2].trajectory.segments[0].twist``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, fields

import numpy as np

from .evaluation import Intrinsics, ObjectModel
from .factors import CameraNoise, CovModelParams, MotionNoise, SigmaModel
from .graph import SolverConfig
from .lie import Pose
from .sim import CorruptionConfig, Occluder, Scenario, Segment, SimObject, Trajectory, TruthFrame, TruthObject
from .tracker import CONST_POSE, CONST_VEL, Detection, Frame, GateConfig, TrackerConfig


class SchemaError(ValueError):
    def __init__(self, field_path, message):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


# -- primitive validators -------------------------------------------------------


def _get(d, key, path, default=...):
    if not isinstance(d, dict):
        raise SchemaError(path or "<root>", "expected an object")
    if key not in d:
        if default is ...:
            raise SchemaError(_join(path, key), "missing required field")
        return default
    return d[key]


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _num(v, path, lo=-math.inf, hi=math.inf, strict_lo=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(path, f"expected a finite number, got {v!r}")
    if v < lo or v > hi or (strict_lo and v == lo):
        raise SchemaError(path, f"value {v} out of range")
    return float(v)


def _int(v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int) and not (isinstance(v, float) and v.is_integer()):
        raise SchemaError(path, f"expected an integer, got {v!r}")
    v = int(v)
    if lo is not None and v < lo:
        raise SchemaError(path, f"value {v} below {lo}")
    return v


def _vec(v, path, n=None):
    if not isinstance(v, (list, tuple)) or (n is not None and len(v) != n):
        raise SchemaError(path, f"expected a list of {n} numbers" if n else "expected a list of numbers")
    return np.array([_num(x, f"{path}[{i}]") for i, x in enumerate(v)])


def _list(v, path):
    if not isinstance(v, list):
        raise SchemaError(path, "expected a list")
    return v


def _bool(v, path):
    if not isinstance(v, bool):
        raise SchemaError(path, f"expected true/false, got {v!r}")
    return v


def _no_extra(d, allowed, path):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise SchemaError(_join(path, extra[0]), "unknown field")


def pose_from(d, path) -> Pose:
    if not isinstance(d, dict):
        raise SchemaError(path, "expected a pose object with 't' and 'q'")
    _no_extra(d, ("t", "q"), path)
    t = _vec(_get(d, "t", path), _join(path, "t"), 3)
    q = _vec(_get(d, "q", path), _join(path, "q"), 4)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-6:
        raise SchemaError(_join(path, "q"), f"quaternion must have unit norm (got {norm:.6g})")
    return Pose.from_quat(q / norm, t)


def _dataclass_from(cls, d, path, converters=None):
    converters = converters or {}
    if not isinstance(d, dict):
        raise SchemaError(path or "<root>", "expected an object")
    names = [f.name for f in fields(cls)]
    _no_extra(d, names, path)
    kwargs = {}
    for k, v in d.items():
        p = _join(path, k)
        kwargs[k] = converters[k](v, p) if k in converters else _num(v, p)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise SchemaError(path or "<root>", str(exc)) from None


# -- JSON helpers ---------------------------------------------------------------


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"line {i + 1}", f"invalid JSON ({exc.msg})") from None
    return out


def write_jsonl(path, items):
    with open(path, "w") as fh:
        for item in items:
            fh.write(dumps(item))
            fh.write("\n")


# -- frames and truth -----------------------------------------------------------


def frame_to_dict(frame: Frame) -> dict:
    return {
        "timestamp": frame.timestamp,
        "camera": frame.camera.to_dict(),
        "detections": [{"label": d.label, "pose": d.pose.to_dict(), "n_px": d.n_px} for d in frame.detections],
    }


def frame_from_dict(d, path="") -> Frame:
    _no_extra(d if isinstance(d, dict) else {}, ("timestamp", "camera", "detections"), path)
    t = _num(_get(d, "timestamp", path), _join(path, "timestamp"))
    cam = pose_from(_get(d, "camera", path), _join(path, "camera"))
    dets = []
    for i, det in enumerate(_list(_get(d, "detections", path, []), _join(path, "detections"))):
        p = f"{_join(path, 'detections')}[{i}]"
        _no_extra(det if isinstance(det, dict) else {}, ("label", "pose", "n_px"), p)
        label = _get(det, "label", p)
        if not isinstance(label, str) or not label:
            raise SchemaError(_join(p, "label"), "expected a non-empty string")
        dets.append(
            Detection(label, pose_from(_get(det, "pose", p), _join(p, "pose")), _int(_get(det, "n_px", p), _join(p, "n_px"), 1), t)
        )
    return Frame(t, cam, dets)


def load_frames(path) -> list:
    return [frame_from_dict(d, f"line {i + 1}") for i, d in enumerate(read_jsonl(path))]


def truth_to_dict(tf: TruthFrame) -> dict:
    return {
        "index": tf.index,
        "timestamp": tf.timestamp,
        "camera": tf.camera.to_dict(),
        "objects": [
            {"object_id": o.object_id, "label": o.label, "pose": o.pose.to_dict(), "visible": o.visible, "n_px": o.n_px}
            for o in tf.objects
        ],
        "outliers": list(tf.outliers),
    }


def truth_from_dict(d, path="") -> TruthFrame:
    objs = []
    for i, o in enumerate(_list(_get(d, "objects", path), _join(path, "objects"))):
        p = f"{_join(path, 'objects')}[{i}]"
        objs.append(
            TruthObject(
                _int(_get(o, "object_id", p, i), _join(p, "object_id")),
                _get(o, "label", p),
                pose_from(_get(o, "pose", p), _join(p, "pose")),
                _bool(_get(o, "visible", p), _join(p, "visible")),
                _int(_get(o, "n_px", p, 1), _join(p, "n_px")),
            )
        )
    return TruthFrame(
        _int(_get(d, "index", path, 0), _join(path, "index")),
        _num(_get(d, "timestamp", path), _join(path, "timestamp")),
        pose_from(_get(d, "camera", path), _join(path, "camera")),
        objs,
        [_int(x, _join(path, "outliers")) for x in _list(_get(d, "outliers", path, []), _join(path, "outliers"))],
    )


def load_truth(path) -> list:
    return [truth_from_dict(d, f"line {i + 1}") for i, d in enumerate(read_jsonl(path))]


# -- predictions ----------------------------------------------------------------


def prediction_batch(index, timestamp, predictions, report=None) -> dict:
    out = {"frame": index, "timestamp": timestamp, "predictions": [p.to_dict() for p in predictions]}
    if report is not None:
        out["solve"] = report.to_dict()
    return out


def predictions_from_batches(batches) -> list:
    """Per-frame ``[{label, pose}]`` lists as consumed by the evaluator."""
    out = []
    for i, b in enumerate(batches):
        p = f"line {i + 1}"
        preds = []
        for j, item in enumerate(_list(_get(b, "predictions", p), _join(p, "predictions"))):
            q = f"{_join(p, 'predictions')}[{j}]"
            preds.append({"label": _get(item, "label", q), "pose": pose_from(_get(item, "pose", q), _join(q, "pose"))})
        out.append(preds)
    return out


# -- object models --------------------------------------------------------------


def models_to_dict(models, intrinsics: Intrinsics | None = None) -> dict:
    return {"models": [m.to_dict() for m in models], "intrinsics": (intrinsics or Intrinsics()).to_dict()}


def models_from_dict(d, path=""):
    models = []
    for i, m in enumerate(_list(_get(d, "models", path), _join(path, "models"))):
        p = f"{_join(path, 'models')}[{i}]"
        pts = _list(_get(m, "points", p), _join(p, "points"))
        if not pts:
            raise SchemaError(_join(p, "points"), "model needs at least one point")
        points = np.array([_vec(x, f"{_join(p, 'points')}[{k}]", 3) for k, x in enumerate(pts)])
        syms = [pose_from(s, f"{_join(p, 'symmetries')}[{k}]") for k, s in enumerate(_get(m, "symmetries", p, []))]
        diam = _get(m, "diameter", p, None)
        diam = None if diam is None else _num(diam, _join(p, "diameter"), 0.0, strict_lo=True)
        models.append(ObjectModel(_get(m, "label", p), points, syms, diam))
    intr = _dataclass_from(Intrinsics, _get(d, "intrinsics", path, {}), _join(path, "intrinsics"))
    return models, intr


# -- scenario -------------------------------------------------------------------


def trajectory_to_dict(tr: Trajectory) -> dict:
    return {
        "initial": tr.initial.to_dict(),
        "segments": [{"start": s.start, "duration": s.duration, "twist": s.twist.tolist()} for s in tr.segments],
    }


def trajectory_from_dict(d, path) -> Trajectory:
    _no_extra(d if isinstance(d, dict) else {}, ("initial", "segments"), path)
    segs = []
    for i, s in enumerate(_list(_get(d, "segments", path, []), _join(path, "segments"))):
        p = f"{_join(path, 'segments')}[{i}]"
        _no_extra(s if isinstance(s, dict) else {}, ("start", "duration", "twist"), p)
        segs.append(
            Segment(
                _num(_get(s, "start", p), _join(p, "start"), 0.0),
                _num(_get(s, "duration", p), _join(p, "duration"), 0.0),
                _vec(_get(s, "twist", p), _join(p, "twist"), 6),
            )
        )
    initial = pose_from(_get(d, "initial", path), _join(path, "initial"))
    try:
        return Trajectory(initial, segs)
    except ValueError as exc:
        raise SchemaError(_join(path, "segments"), str(exc)) from None


def cov_model_to_dict(p: CovModelParams) -> dict:
    return asdict(p)


def cov_model_from_dict(d, path) -> CovModelParams:
    """Accepts ``fitcov`` output directly; its ``notes`` list is ignored."""
    if isinstance(d, dict) and "notes" in d:
        d = {k: v for k, v in d.items() if k != "notes"}

    def sigma(v, p):
        return _dataclass_from(SigmaModel, v, p)

    return _dataclass_from(
        CovModelParams,
        d,
        path,
        {"xy": sigma, "z": sigma, "rot": sigma, "decoupled": _bool, "visibility_dependent": _bool, "ray_aligned": _bool},
    )


def corruption_to_dict(c: CorruptionConfig) -> dict:
    return {
        "dropout": c.dropout,
        "outlier": c.outlier,
        "outlier_modes": list(c.outlier_modes),
        "noise": cov_model_to_dict(c.noise),
        "n_px_scale": c.n_px_scale,
        "camera_sigma_t": c.camera_sigma_t,
        "camera_sigma_r": c.camera_sigma_r,
        "occluders": [{"start": o.start, "end": o.end, "region": list(o.region)} for o in c.occluders],
        "workspace": [list(w) for w in c.workspace],
    }


def corruption_from_dict(d, path) -> CorruptionConfig:
    def modes(v, p):
        v = _list(v, p)
        for i, m in enumerate(v):
            if m not in ("symmetry_flip", "uniform"):
                raise SchemaError(f"{p}[{i}]", f"unknown outlier mode {m!r}")
        return tuple(v)

    def occluders(v, p):
        out = []
        for i, o in enumerate(_list(v, p)):
            q = f"{p}[{i}]"
            _no_extra(o if isinstance(o, dict) else {}, ("start", "end", "region"), q)
            out.append(
                Occluder(
                    _num(_get(o, "start", q), _join(q, "start")),
                    _num(_get(o, "end", q), _join(q, "end")),
                    tuple(_vec(_get(o, "region", q, [0, 0, 640, 480]), _join(q, "region"), 4).tolist()),
                )
            )
        return out

    def workspace(v, p):
        v = _list(v, p)
        if len(v) != 3:
            raise SchemaError(p, "expected three [lo, hi] ranges")
        return tuple(tuple(_vec(r, f"{p}[{i}]", 2).tolist()) for i, r in enumerate(v))

    def prob(v, p):
        return _num(v, p, 0.0, 1.0)

    return _dataclass_from(
        CorruptionConfig,
        d,
        path,
        {
            "dropout": prob,
            "outlier": prob,
            "outlier_modes": modes,
            "noise": cov_model_from_dict,
            "occluders": occluders,
            "workspace": workspace,
            "n_px_scale": lambda v, p: _num(v, p, 0.0, strict_lo=True),
            "camera_sigma_t": lambda v, p: _num(v, p, 0.0),
            "camera_sigma_r": lambda v, p: _num(v, p, 0.0),
        },
    )


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "duration": sc.duration,
        "fps": sc.fps,
        "seed": sc.seed,
        "intrinsics": sc.intrinsics.to_dict(),
        "camera": trajectory_to_dict(sc.camera),
        "objects": [
            {
                "label": o.label,
                "radius": o.radius,
                "extents": list(o.extents),
                "symmetries": [s.to_dict() for s in o.symmetries],
                "trajectory": trajectory_to_dict(o.trajectory),
            }
            for o in sc.objects
        ],
        "corruption": corruption_to_dict(sc.corruption),
    }


def scenario_from_dict(d) -> Scenario:
    """Full scenario, or a generator shorthand ``{"generator": "static"|"dynamic", ...}``."""
    from . import sim

    if not isinstance(d, dict):
        raise SchemaError("<root>", "expected an object")
    if "generator" in d:
        _no_extra(d, ("generator", "n_objects", "seed", "duration", "fps", "corruption"), "")
        gen = d["generator"]
        makers = {"static": sim.make_static_scene, "dynamic": sim.make_dynamic_scene}
        if gen not in makers:
            raise SchemaError("generator", f"expected 'static' or 'dynamic', got {gen!r}")
        corruption = corruption_from_dict(d["corruption"], "corruption") if "corruption" in d else None
        n = _int(_get(d, "n_objects", "", 5), "n_objects", 1)
        if n > 20:
            raise SchemaError("n_objects", "at most 20 objects")
        return makers[gen](
            n,
            seed=_int(_get(d, "seed", "", 0), "seed", 0),
            duration=_num(_get(d, "duration", "", 10.0), "duration", 0.0),
            fps=_num(_get(d, "fps", "", 30.0), "fps", 0.0, strict_lo=True),
            corruption=corruption,
        )

    _no_extra(d, ("duration", "fps", "seed", "intrinsics", "camera", "objects", "corruption"), "")
    objects = []
    for i, o in enumerate(_list(_get(d, "objects", ""), "objects")):
        p = f"objects[{i}]"
        _no_extra(o if isinstance(o, dict) else {}, ("label", "radius", "extents", "symmetries", "trajectory"), p)
        label = _get(o, "label", p)
        if not isinstance(label, str) or not label:
            raise SchemaError(_join(p, "label"), "expected a non-empty string")
        syms = [pose_from(s, f"{p}.symmetries[{k}]") for k, s in enumerate(_list(_get(o, "symmetries", p, []), _join(p, "symmetries")))]
        objects.append(
            SimObject(
                label,
                _num(_get(o, "radius", p), _join(p, "radius"), 0.0, strict_lo=True),
                trajectory_from_dict(_get(o, "trajectory", p), _join(p, "trajectory")),
                syms,
                tuple(_vec(_get(o, "extents", p, [0.8, 0.5, 0.33]), _join(p, "extents"), 3).tolist()),
            )
        )
    corruption = corruption_from_dict(d["corruption"], "corruption") if "corruption" in d else CorruptionConfig()
    intr = _dataclass_from(Intrinsics, _get(d, "intrinsics", "", {}), "intrinsics")
    return Scenario(
        _num(_get(d, "duration", ""), "duration", 0.0),
        _num(_get(d, "fps", "", 30.0), "fps", 0.0, strict_lo=True),
        objects,
        trajectory_from_dict(_get(d, "camera", ""), "camera"),
        corruption,
        _int(_get(d, "seed", "", 0), "seed", 0),
        intr,
    )


# -- tracker configuration ------------------------------------------------------

RECALL = "recall-oriented"
PRECISION = "precision-oriented"

# Chosen from the PR sweep on synthetic scenes (see README); per motion model.
PRESETS = {
    CONST_POSE: {
        RECALL: {"gates": {"tau_pred_t": 1e-5, "tau_pred_r": 3e-4}, "motion_noise": {}},
        PRECISION: {"gates": {"tau_pred_t": 1e-6, "tau_pred_r": 1e-4}, "motion_noise": {}},
    },
    CONST_VEL: {
        RECALL: {"gates": {"tau_pred_t": 1e-5, "tau_pred_r": 1e-3}, "motion_noise": {}},
        PRECISION: {"gates": {"tau_pred_t": 3e-6, "tau_pred_r": 1e-4}, "motion_noise": {}},
    },
}
PRESET_NAMES = (RECALL, PRECISION, "custom")


def tracker_config_to_dict(cfg: TrackerConfig) -> dict:
    return {
        "motion_model": cfg.motion_model,
        "window_mode": cfg.window_mode,
        "preset": cfg.preset,
        "association_covariance": cfg.association_covariance,
        "gates": asdict(cfg.gates),
        "cov_model": cov_model_to_dict(cfg.cov_model),
        "motion_noise": asdict(cfg.motion_noise),
        "camera_noise": asdict(cfg.camera_noise),
        "solver": asdict(cfg.solver),
        "retire_after": cfg.retire_after,
        "default_radius": cfg.default_radius,
        "radii": dict(cfg.radii),
    }


def tracker_config_from_dict(d, motion_model=None, window_mode=None, horizon=None, preset=None) -> TrackerConfig:
    """Build a config; keyword arguments override the file (CLI flags)."""
    d = dict(d or {})
    allowed = (
        "motion_model", "window_mode", "preset", "association_covariance", "gates", "cov_model",
        "motion_noise", "camera_noise", "solver", "retire_after", "default_radius", "radii",
    )  # fmt: skip
    _no_extra(d, allowed, "")
    mm = motion_model or d.get("motion_model", CONST_POSE)
    if mm not in PRESETS:
        raise SchemaError("motion_model", f"expected one of {sorted(PRESETS)}, got {mm!r}")
    name = preset or d.get("preset", RECALL)
    if name not in PRESET_NAMES:
        raise SchemaError("preset", f"expected one of {list(PRESET_NAMES)}, got {name!r}")
    base = PRESETS[mm].get(name, {"gates": {}, "motion_noise": {}})
    gates = {**base["gates"], **d.get("gates", {})}
    noise = {**base["motion_noise"], **d.get("motion_noise", {})}
    if horizon is not None:
        gates["horizon"] = horizon
    wm = window_mode or d.get("window_mode", "prior")
    if wm not in ("prior", "delete"):
        raise SchemaError("window_mode", f"expected 'prior' or 'delete', got {wm!r}")
    assoc = d.get("association_covariance", "joint")
    if assoc not in ("joint", "measurement"):
        raise SchemaError("association_covariance", f"expected 'joint' or 'measurement', got {assoc!r}")
    retire = d.get("retire_after")
    radii = d.get("radii", {})
    if not isinstance(radii, dict):
        raise SchemaError("radii", "expected an object mapping labels to radii")
    return TrackerConfig(
        gates=_dataclass_from(GateConfig, gates, "gates"),
        cov_model=cov_model_from_dict(d.get("cov_model", {}), "cov_model"),
        motion_noise=_dataclass_from(MotionNoise, noise, "motion_noise"),
        camera_noise=_dataclass_from(CameraNoise, d.get("camera_noise", {}), "camera_noise"),
        motion_model=mm,
        window_mode=wm,
        retire_after=None if retire is None else _num(retire, "retire_after", 0.0),
        default_radius=_num(d.get("default_radius", 0.05), "default_radius", 0.0, strict_lo=True),
        radii={k: _num(v, f"radii.{k}", 0.0, strict_lo=True) for k, v in radii.items()},
        solver=_dataclass_from(SolverConfig, d.get("solver", {}), "solver", {"max_iterations": _int, "check_rank": _bool}),
        preset=name,
        association_covariance=assoc,
    )


# -- covariance-fit records -----------------------------------------------------


def error_samples(records) -> dict:
    """Split ``errors.jsonl`` records into ``(n_px, error)`` samples per channel.

    A record holds ``n_px`` and any of ``xy`` (per-axis errors in the ray
    frame), ``z`` (depth error), ``rot`` (per-axis rotation errors) or
    ``rot_angle`` (total angle, treated as sqrt(3) per-axis samples' norm).
    """
    out = {"xy": [], "z": [], "rot": []}
    for i, r in enumerate(records):
        p = f"line {i + 1}"
        n = _num(_get(r, "n_px", p), _join(p, "n_px"), 0.0)
        _no_extra(r, ("n_px", "xy", "z", "rot", "rot_angle"), p)
        for key in ("xy", "z", "rot"):
            if key in r:
                v = r[key]
                vals = _vec(v, _join(p, key)) if isinstance(v, list) else [_num(v, _join(p, key))]
                out[key].extend((n, float(e)) for e in vals)
        if "rot_angle" in r:
            out["rot"].append((n, _num(r["rot_angle"], _join(p, "rot_angle")) / math.sqrt(3.0)))
    return out
