"""BOP-style pose error metrics and precision/recall scoring.

VSD is not implemented (it needs depth rendering); average recall and
precision here are the mean of the MSSD and MSPD averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import Pose

MSSD_FRACTIONS = tuple(np.round(np.arange(0.05, 0.501, 0.05), 2))
MSPD_PIXELS = tuple(float(p) for p in range(5, 51, 5))


class EvaluationError(ValueError):
    pass


class BehindCameraError(EvaluationError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        if np.any(p[..., 2] <= 0):
            raise BehindCameraError("point behind the camera")
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)

    def to_dict(self):
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


@dataclass
class ObjectModel:
    label: str
    points: np.ndarray
    symmetries: list = field(default_factory=lambda: [Pose.identity()])
    diameter: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("object model needs at least one point")
        if not any(S.allclose(Pose.identity()) for S in self.symmetries):
            self.symmetries = [Pose.identity()] + list(self.symmetries)
        if self.diameter is None:
            d = self.points[:, None, :] - self.points[None, :, :]
            self.diameter = float(np.sqrt((d * d).sum(-1)).max())

    def to_dict(self):
        return {
            "label": self.label,
            "points": self.points.tolist(),
            "symmetries": [S.to_dict() for S in self.symmetries],
            "diameter": self.diameter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["label"], d["points"], [Pose.from_dict(s) for s in d.get("symmetries", [])], d.get("diameter"))


def mssd(estimate: Pose, truth: Pose, model: ObjectModel) -> float:
    """Maximum symmetry-aware surface distance, in meters."""
    pe = estimate.act(model.points)
    best = np.inf
    for S in model.symmetries:
        pt = (truth @ S).act(model.points)
        best = min(best, float(np.sqrt(((pe - pt) ** 2).sum(-1)).max()))
    return best


def mspd(estimate: Pose, truth: Pose, model: ObjectModel, intrinsics: Intrinsics, camera: Pose | None = None) -> float:
    """Maximum symmetry-aware projection distance, in pixels.

    Poses are in the camera frame unless ``camera`` (camera-to-reference) is given.
    """
    if camera is not None:
        cinv = camera.inverse()
        estimate, truth = cinv @ estimate, cinv @ truth
    ue = intrinsics.project(estimate.act(model.points))
    best = np.inf
    for S in model.symmetries:
        ut = intrinsics.project((truth @ S).act(model.points))
        best = min(best, float(np.sqrt(((ue - ut) ** 2).sum(-1)).max()))
    return best


@dataclass
class MetricReport:
    recall: float
    precision: float
    recall_mssd: float
    precision_mssd: float
    recall_mspd: float
    precision_mspd: float
    mssd_thresholds: list
    mspd_thresholds: list
    curve: list  # (metric, threshold, recall, precision)
    errors: list  # per matched pair
    n_visible: int
    n_emitted: int
    note: str = "averages over MSSD and MSPD only (no VSD)"

    def to_dict(self):
        return {
            "recall": self.recall,
            "precision": self.precision,
            "recall_mssd": self.recall_mssd,
            "precision_mssd": self.precision_mssd,
            "recall_mspd": self.recall_mspd,
            "precision_mspd": self.precision_mspd,
            "mssd_thresholds": list(self.mssd_thresholds),
            "mspd_thresholds": list(self.mspd_thresholds),
            "n_visible": self.n_visible,
            "n_emitted": self.n_emitted,
            "note": self.note,
            "curve": [dict(metric=m, threshold=t, recall=r, precision=p) for m, t, r, p in self.curve],
            "errors": self.errors,
        }


def _match_frame(preds, objects, models, intrinsics, camera):
    """Greedy one-to-one matching by label and smallest MSSD.

    Returns ``(pairs, ignored)``: matched ``(pred_idx, obj_idx, mssd, mspd)``
    tuples and the number of predictions matched to invisible objects.
    """
    cand = []
    for i, p in enumerate(preds):
        for j, o in enumerate(objects):
            if p["label"] != o["label"]:
                continue
            model = models[o["label"]]
            cand.append((mssd(p["pose"], o["pose"], model), i, j))
    cand.sort(key=lambda c: (c[0], c[1], c[2]))
    used_p, used_o, pairs = set(), set(), []
    ignored = 0
    for e, i, j in cand:
        if i in used_p or j in used_o:
            continue
        used_p.add(i)
        used_o.add(j)
        if not objects[j]["visible"]:
            ignored += 1
            continue
        try:
            e2 = mspd(preds[i]["pose"], objects[j]["pose"], models[objects[j]["label"]], intrinsics, camera)
        except BehindCameraError:
            e2 = np.inf
        pairs.append((i, j, e, e2))
    return pairs, ignored


def precision_recall(
    predictions,
    truth,
    models,
    intrinsics: Intrinsics | None = None,
    mssd_fractions=MSSD_FRACTIONS,
    mspd_pixels=MSPD_PIXELS,
) -> MetricReport:
    """Score a prediction stream against ground truth.

    ``predictions``: per frame, a list of dicts with ``label`` and ``pose``
    (reference frame). ``truth``: per frame, a dict with ``timestamp``,
    ``camera`` and ``objects`` (``label``, ``pose``, ``visible``).
    Counts are pooled over frames; with nothing emitted precision is 1.
    """
    intrinsics = intrinsics or Intrinsics()
    if not truth:
        raise EvaluationError("empty ground-truth stream")
    if len(predictions) != len(truth):
        raise EvaluationError(f"stream misalignment: {len(predictions)} prediction frames vs {len(truth)} truth frames")
    if isinstance(models, (list, tuple)):
        models = {m.label: m for m in models}

    mssd_fractions = list(mssd_fractions)
    mspd_pixels = list(mspd_pixels)
    ok_mssd = np.zeros(len(mssd_fractions))
    ok_mspd = np.zeros(len(mspd_pixels))
    n_visible = n_emitted = 0
    errors = []
    for k, (preds, gt) in enumerate(zip(predictions, truth)):
        objects = gt["objects"]
        pairs, ignored = _match_frame(preds, objects, models, intrinsics, gt.get("camera"))
        n_visible += sum(1 for o in objects if o["visible"])
        n_emitted += len(preds) - ignored
        for i, j, e_sd, e_pd in pairs:
            diam = models[objects[j]["label"]].diameter
            ok_mssd += np.array([e_sd < f * diam for f in mssd_fractions])
            ok_mspd += np.array([e_pd < p for p in mspd_pixels])
            errors.append({"frame": k, "label": objects[j]["label"], "object": j, "mssd": e_sd, "mspd": e_pd})

    def ratio(num, den):
        return num / den if den > 0 else np.ones_like(num)

    rec_sd, prec_sd = (ok_mssd / n_visible if n_visible else np.zeros_like(ok_mssd)), ratio(ok_mssd, n_emitted)
    rec_pd, prec_pd = (ok_mspd / n_visible if n_visible else np.zeros_like(ok_mspd)), ratio(ok_mspd, n_emitted)
    curve = [("mssd", f, float(r), float(p)) for f, r, p in zip(mssd_fractions, rec_sd, prec_sd)]
    curve += [("mspd", px, float(r), float(p)) for px, r, p in zip(mspd_pixels, rec_pd, prec_pd)]
    r_sd, p_sd = float(np.mean(rec_sd)), float(np.mean(prec_sd))
    r_pd, p_pd = float(np.mean(rec_pd)), float(np.mean(prec_pd))
    return MetricReport(
        recall=0.5 * (r_sd + r_pd),
        precision=0.5 * (p_sd + p_pd),
        recall_mssd=r_sd,
        precision_mssd=p_sd,
        recall_mspd=r_pd,
        precision_mspd=p_pd,
        mssd_thresholds=mssd_fractions,
        mspd_thresholds=mspd_pixels,
        curve=curve,
        errors=errors,
        n_visible=n_visible,
        n_emitted=n_emitted,
    )


def pareto_front(points):
    """Indices of non-dominated ``(recall, precision)`` points, by increasing recall."""
    order = sorted(range(len(points)), key=lambda i: (-points[i][0], -points[i][1], i))
    front, best_p = [], -np.inf
    for i in order:
        if points[i][1] > best_p:
            front.append(i)
            best_p = points[i][1]
    return front[::-1]
