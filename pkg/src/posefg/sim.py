"""Synthetic scenes: ground-truth trajectories and corrupted pose detections.

Stands in for a neural pose estimator. Measurement noise is drawn from the
same covariance model the tracker uses, and detector failures are modelled
as random dropout, occluder windows and outliers (symmetry flips or uniform
poses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .evaluation import Intrinsics, ObjectModel
from .factors import CovModelParams, measurement_covariance, ray_frame
from .lie import Pose
from .tracker import Detection, Frame

N_PX_SCALE = 4e5
FLIP_Z = Pose(lie.exp_so3([0.0, 0.0, math.pi]), np.zeros(3))


class ScenarioError(ValueError):
    pass


@dataclass
class Segment:
    start: float
    duration: float
    twist: np.ndarray  # body frame (v, w)

    def __post_init__(self):
        self.twist = np.asarray(self.twist, dtype=float).reshape(6)


@dataclass
class Trajectory:
    """Piecewise constant-twist motion starting from ``initial`` at t=0."""

    initial: Pose
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.segments = sorted(self.segments, key=lambda s: s.start)
        for a, b in zip(self.segments, self.segments[1:]):
            if b.start < a.start + a.duration - 1e-9:
                raise ScenarioError("trajectory segments overlap")

    def pose(self, t: float) -> Pose:
        T = self.initial
        for seg in self.segments:
            if t <= seg.start:
                break
            T = T @ lie.exp_se3(min(t - seg.start, seg.duration) * seg.twist)
        return T

    def twist(self, t: float) -> np.ndarray:
        for seg in self.segments:
            if seg.start <= t < seg.start + seg.duration:
                return seg.twist.copy()
        return np.zeros(6)

    @classmethod
    def static(cls, pose: Pose) -> Trajectory:
        return cls(pose, [])


@dataclass
class SimObject:
    label: str
    radius: float
    trajectory: Trajectory
    # Pose ambiguities the detector may confuse (used for flip outliers).
    symmetries: list = field(default_factory=lambda: [FLIP_Z])
    extents: tuple = (0.8, 0.5, 0.33)

    def model(self) -> ObjectModel:
        """Evaluation model: box points, identity-only symmetry."""
        half = np.asarray(self.extents, dtype=float)
        half = half / np.linalg.norm(half) * self.radius
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * half
        mids = []
        for i in range(8):
            for j in range(i + 1, 8):
                if np.sum(corners[i] != corners[j]) == 1:
                    mids.append(0.5 * (corners[i] + corners[j]))
        return ObjectModel(self.label, np.vstack([corners, mids]), [Pose.identity()], 2.0 * self.radius)


@dataclass
class Occluder:
    """Image region (pixels) hiding objects whose centre projects into it."""

    start: float
    end: float
    region: tuple = (0.0, 0.0, 640.0, 480.0)  # u0, v0, u1, v1

    def hides(self, t, uv) -> bool:
        u0, v0, u1, v1 = self.region
        return self.start <= t < self.end and u0 <= uv[0] < u1 and v0 <= uv[1] < v1


@dataclass
class CorruptionConfig:
    dropout: float = 0.2
    outlier: float = 0.1
    outlier_modes: tuple = ("symmetry_flip",)
    noise: CovModelParams = field(default_factory=CovModelParams)
    n_px_scale: float = N_PX_SCALE
    camera_sigma_t: float = 0.001
    camera_sigma_r: float = 0.002
    occluders: list = field(default_factory=list)
    workspace: tuple = ((-0.3, 0.3), (-0.2, 0.2), (0.3, 1.2))  # camera-frame box for uniform outliers

    def __post_init__(self):
        for name in ("dropout", "outlier"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"corruption.{name}: probability must be in [0, 1]")
        for m in self.outlier_modes:
            if m not in ("symmetry_flip", "uniform"):
                raise ScenarioError(f"corruption.outlier_modes: unknown mode {m!r}")


@dataclass
class Scenario:
    duration: float
    fps: float
    objects: list
    camera: Trajectory
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    seed: int = 0
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    def __post_init__(self):
        if not self.fps > 0:
            raise ScenarioError("fps: frame rate must be positive")
        if self.duration < 0:
            raise ScenarioError("duration: must be non-negative")

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.fps + 1e-9))

    def models(self) -> list:
        return [o.model() for o in self.objects]


@dataclass
class TruthObject:
    object_id: int
    label: str
    pose: Pose
    visible: bool
    n_px: int


@dataclass
class TruthFrame:
    index: int
    timestamp: float
    camera: Pose
    objects: list
    outliers: list  # indices into the frame's detections

    def as_eval(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "camera": self.camera,
            "objects": [{"label": o.label, "pose": o.pose, "visible": o.visible} for o in self.objects],
        }


def n_px_proxy(radius, distance, scale=N_PX_SCALE) -> int:
    return max(1, int(round(scale * (radius / distance) ** 2)))


def perturb(T_co: Pose, n_px, noise: CovModelParams, z):
    """Noisy measurements ``T_co * Exp(L z)`` with ``L L^T`` the measurement covariance.

    ``z`` holds standard-normal draws of shape ``(N, 6)``; returns stacked ``(R, t)``.
    """
    L = np.linalg.cholesky(measurement_covariance(T_co, n_px, noise))
    dR, dt = lie.se3_exp(np.asarray(z, dtype=float) @ L.T)
    return lie.se3_compose(T_co.R, T_co.t, dR, dt)


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose.from_quat(q, np.zeros(3)).R


def generate(scenario: Scenario):
    """Simulate ``scenario``; returns ``(truth_frames, frames)``.

    The random stream consumes a fixed number of draws per frame and object,
    so changing probabilities does not reshuffle the noise of other events.
    """
    rng = np.random.default_rng(scenario.seed)
    cc = scenario.corruption
    K = scenario.intrinsics
    cam_std = np.array([cc.camera_sigma_t] * 3 + [cc.camera_sigma_r] * 3)
    truth, frames = [], []
    for k in range(scenario.n_frames):
        t = k / scenario.fps
        T_c = scenario.camera.pose(t)
        T_c_meas = T_c @ lie.exp_se3(rng.normal(size=6) * cam_std)
        dets, objs, outliers = [], [], []
        for i, obj in enumerate(scenario.objects):
            u_drop, u_out, u_mode, u_sym = rng.uniform(size=4)
            z = rng.normal(size=6)
            pos = rng.uniform(size=3)
            rot = _random_rotation(rng)

            T_o = obj.trajectory.pose(t)
            T_co = T_c.inverse() @ T_o
            dist = float(np.linalg.norm(T_co.t))
            if dist < 1e-9:
                raise ScenarioError(f"objects[{i}] passes through the camera origin at t={t:.3f}")
            n_px = n_px_proxy(obj.radius, dist, cc.n_px_scale)
            visible = T_co.t[2] > 1e-3
            if visible:
                uv = K.project(T_co.t)
                visible = 0 <= uv[0] < K.width and 0 <= uv[1] < K.height
                visible = visible and not any(o.hides(t, uv) for o in cc.occluders)
            objs.append(TruthObject(i, obj.label, T_o, bool(visible), n_px))
            if not visible or u_drop < cc.dropout:
                continue

            meas = Pose(*(a[0] for a in perturb(T_co, n_px, cc.noise, z[None])))
            if u_out < cc.outlier and cc.outlier_modes:
                mode = cc.outlier_modes[min(int(u_mode * len(cc.outlier_modes)), len(cc.outlier_modes) - 1)]
                flips = [S for S in obj.symmetries if not S.allclose(Pose.identity())]
                if mode == "symmetry_flip" and flips:
                    meas = meas @ flips[min(int(u_sym * len(flips)), len(flips) - 1)]
                else:
                    lo = np.array([w[0] for w in cc.workspace])
                    hi = np.array([w[1] for w in cc.workspace])
                    meas = Pose(rot, lo + pos * (hi - lo))
                outliers.append(len(dets))
            dets.append(Detection(obj.label, meas, n_px, t))
        truth.append(TruthFrame(k, t, T_c, objs, outliers))
        frames.append(Frame(t, T_c_meas, dets))
    return truth, frames


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose (x right, y down, z forward) at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return Pose(np.column_stack([r, d, f]), position)


def orbit(radius, height, start_angle, rate, duration) -> Trajectory:
    """Camera circling the world z axis while looking at the origin."""
    T0 = look_at((radius * math.cos(start_angle), radius * math.sin(start_angle), height))
    world_twist = np.array([0.0, 0.0, 0.0, 0.0, 0.0, rate])
    body = lie.se3_adjoint(*lie.se3_inverse(T0.R, T0.t)) @ world_twist
    return Trajectory(T0, [Segment(0.0, duration, body)] if duration > 0 else [])


def _place_objects(rng, n, spread):
    objs = []
    for i in range(n):
        radius = float(rng.uniform(0.04, 0.07))
        xy = rng.uniform(-spread, spread, size=2)
        yaw = rng.uniform(-math.pi, math.pi)
        pose = Pose(lie.exp_so3([0.0, 0.0, yaw]), [xy[0], xy[1], radius * 0.33])
        objs.append((f"obj{i:02d}", radius, pose))
    return objs


def _check_n(n_objects):
    if not 1 <= n_objects <= 20:
        raise ScenarioError("n_objects must be in [1, 20]")


def make_static_scene(n_objects=5, seed=0, duration=10.0, fps=30.0, corruption=None) -> Scenario:
    _check_n(n_objects)
    rng = np.random.default_rng([seed, 1])
    objects = [SimObject(l, r, Trajectory.static(p)) for l, r, p in _place_objects(rng, n_objects, 0.2)]
    camera = orbit(0.75, 0.45, rng.uniform(-math.pi, math.pi), 0.12 * rng.choice([-1.0, 1.0]), duration)
    return Scenario(duration, fps, objects, camera, corruption or CorruptionConfig(), seed)


def _back_and_forth(rng, duration, max_speed, max_rate):
    segs, t = [], float(rng.uniform(0.0, 0.3))
    while t < duration:
        d = float(rng.uniform(0.4, 1.2))
        v = rng.normal(size=3)
        v *= rng.uniform(0.05, max_speed) / np.linalg.norm(v)
        w = rng.normal(size=3)
        w *= rng.uniform(0.0, max_rate) / np.linalg.norm(w)
        xi = np.concatenate([v, w])
        segs.append(Segment(t, d, xi))
        segs.append(Segment(t + d, d, -xi))
        t += 2 * d + float(rng.uniform(0.0, 0.4))
    return segs


def make_dynamic_scene(
    n_objects=5, seed=0, duration=10.0, fps=30.0, corruption=None, max_speed=0.3, max_rate=1.0, n_occlusions=2
) -> Scenario:
    _check_n(n_objects)
    rng = np.random.default_rng([seed, 2])
    objects = [
        SimObject(l, r, Trajectory(p, _back_and_forth(rng, duration, max_speed, max_rate)))
        for l, r, p in _place_objects(rng, n_objects, 0.15)
    ]
    camera = orbit(0.8, 0.5, rng.uniform(-math.pi, math.pi), 0.08 * rng.choice([-1.0, 1.0]), duration)
    corruption = corruption or CorruptionConfig()
    if corruption.occluders == [] and n_occlusions > 0 and duration > 2.0:
        occ = []
        for start in np.sort(rng.uniform(1.0, duration - 1.0, size=n_occlusions)):
            occ.append(Occluder(float(start), float(start + rng.uniform(0.5, 1.0)), (200.0, 140.0, 440.0, 340.0)))
        corruption.occluders = occ
    return Scenario(duration, fps, objects, camera, corruption, seed)


def raw_predictions(frames) -> list:
    """Per-frame baseline: every detection mapped to the reference frame, unfiltered."""
    return [[{"label": d.label, "pose": f.camera @ d.pose} for d in f.detections] for f in frames]


def detection_errors(truth, frames) -> list:
    """Error records of inlier detections for covariance fitting.

    Translation errors are expressed in the ray frame (z along the
    camera-to-object ray), rotation errors per axis in the object frame.
    """
    out = []
    for gt, frame in zip(truth, frames):
        bad = set(gt.outliers)
        by_label = {o.label: o for o in gt.objects}
        cam_inv = gt.camera.inverse()
        for j, det in enumerate(frame.detections):
            if j in bad or det.label not in by_label:
                continue
            T_co = cam_inv @ by_label[det.label].pose
            delta = lie.log_se3(T_co.inverse() @ det.pose)
            # delta's translation lives in the object frame; rotate into the ray frame.
            e = ray_frame(T_co.t).T @ (T_co.R @ delta[:3])
            out.append({"n_px": det.n_px, "xy": e[:2].tolist(), "z": float(e[2]), "rot": delta[3:].tolist()})
    return out
