"""Online fixed-lag smoother for multiple object poses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import lie
from .factors import (
    CameraFactor,
    CameraNoise,
    ConstantPoseFactor,
    CovModelParams,
    IntegrationFactor,
    MotionNoise,
    ObjectFactor,
    TwistSmoothnessFactor,
    constant_pose_cov,
    integrate,
    integration_cov,
    measurement_covariance,
    twist_prior_cov,
    twist_smoothness_cov,
)
from .graph import POSE, VECTOR, FactorGraph, SingularInformationError, SolverConfig, SolveReport, VectorPriorFactor
from .lie import Pose

log = logging.getLogger(__name__)

CONST_POSE = "const_pose"
CONST_VEL = "const_vel"
MOTION_MODELS = (CONST_POSE, CONST_VEL)
WINDOW_MODES = ("prior", "delete")


class OutOfOrderFrameError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    label: str
    pose: Pose  # object in camera frame
    n_px: int
    timestamp: float | None = None

    def __post_init__(self):
        if self.n_px < 1:
            raise ValueError("n_px must be >= 1")


@dataclass(frozen=True)
class Frame:
    timestamp: float
    camera: Pose
    detections: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        for d in self.detections:
            if d.timestamp is not None and abs(d.timestamp - self.timestamp) > 1e-9:
                raise ValueError("detection timestamp differs from its frame")


@dataclass(frozen=True)
class Prediction:
    track_id: int
    label: str
    pose: Pose
    volume_t: float
    volume_r: float
    timestamp: float

    def to_dict(self):
        return {
            "track_id": self.track_id,
            "label": self.label,
            "pose": self.pose.to_dict(),
            "volume_t": self.volume_t,
            "volume_r": self.volume_r,
            "timestamp": self.timestamp,
        }


@dataclass
class GateConfig:
    tau_outlier_t: float = 0.1
    tau_outlier_r: float = math.radians(10.0)
    # const_pose recall-oriented preset
    tau_pred_t: float = 1e-5
    tau_pred_r: float = 3e-4
    horizon: float = 1.0

    def __post_init__(self):
        for name in ("tau_outlier_t", "tau_outlier_r", "tau_pred_t", "tau_pred_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")


@dataclass
class TrackerConfig:
    gates: GateConfig = field(default_factory=GateConfig)
    cov_model: CovModelParams = field(default_factory=CovModelParams)
    motion_noise: MotionNoise = field(default_factory=MotionNoise)
    camera_noise: CameraNoise = field(default_factory=CameraNoise)
    motion_model: str = CONST_POSE
    window_mode: str = "prior"
    retire_after: float | None = None
    default_radius: float = 0.05
    radii: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)
    preset: str = "custom"
    # Covariance behind the association score: "joint" adds the track's
    # extrapolated marginal to the measurement covariance, "measurement" uses
    # the measurement covariance alone.
    association_covariance: str = "joint"

    def __post_init__(self):
        if self.association_covariance not in ("joint", "measurement"):
            raise ValueError("association_covariance must be 'joint' or 'measurement'")
        if self.motion_model not in MOTION_MODELS:
            raise ValueError(f"motion_model must be one of {MOTION_MODELS}")
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(f"window_mode must be one of {WINDOW_MODES}")

    @property
    def retire_time(self) -> float:
        return 2.0 * self.gates.horizon if self.retire_after is None else self.retire_after

    def radius(self, label) -> float:
        return float(self.radii.get(label, self.default_radius))


@dataclass
class Track:
    id: int
    label: str
    radius: float
    motion_model: str
    created: float
    last_detection: float
    poses: list = field(default_factory=list)  # (timestamp, variable id)
    twists: list = field(default_factory=list)
    n_detections: int = 0
    retired: bool = False
    twist_anchor: int | None = None  # twist variable carrying the initialization prior

    @property
    def latest_pose(self):
        return self.poses[-1][1]

    @property
    def latest_twist(self):
        return self.twists[-1][1] if self.twists else None


@dataclass(frozen=True)
class TrackState:
    """Immutable per-track summary exported after each solve."""

    track_id: int
    label: str
    radius: float
    motion_model: str
    timestamp: float
    pose: Pose
    twist: np.ndarray | None
    covariance: np.ndarray | None  # 6x6 (pose) or 12x12 (pose, twist)
    last_detection: float
    n_detections: int

    @property
    def constrained(self) -> bool:
        return self.covariance is not None


def ellipsoid_volume(cov3) -> float:
    """Volume of the 1-sigma ellipsoid of a 3x3 covariance."""
    det = max(float(np.linalg.det(cov3)), 0.0)
    return 4.0 / 3.0 * math.pi * math.sqrt(det)


def extrapolate(state: TrackState, dt: float, noise: MotionNoise):
    """Pose and 6x6 covariance of ``state`` propagated ``dt`` seconds ahead."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    (pose,), cov = extrapolate_many([state], np.array([dt]), noise)
    return pose, cov[0]


class _Stack:
    """Per-snapshot arrays of constrained states for batched extrapolation."""

    def __init__(self, states, noise: MotionNoise):
        self.states = list(states)
        self.times = np.array([s.timestamp for s in self.states])
        vel = [i for i, s in enumerate(self.states) if s.motion_model == CONST_VEL and s.twist is not None]
        self.vel = np.array(vel, dtype=np.intp)
        self.static = np.setdiff1d(np.arange(len(self.states)), self.vel)
        self.base = np.array([s.covariance[:6, :6] for s in self.states]).reshape(-1, 6, 6)
        self.twist = np.array([self.states[i].twist for i in vel]).reshape(-1, 6)
        self.C = np.array([self.states[i].covariance for i in vel]).reshape(-1, 12, 12)
        self.R = np.array([self.states[i].pose.R for i in vel]).reshape(-1, 3, 3)
        self.t = np.array([self.states[i].pose.t for i in vel]).reshape(-1, 3)
        self.walk = np.diag(constant_pose_cov(noise, 1.0))
        self.smooth = np.diag(twist_smoothness_cov(noise, 1.0))

    def extrapolate(self, dts):
        """Constant-pose tracks keep their pose and gain the random-walk covariance.

        Constant-velocity tracks move along their twist; the pose/twist joint
        covariance is mapped through ``[Ad(Exp(-dt x)), dt Jr(dt x)]`` and the
        twist random walk adds ``Q_v dt^3 / 3``.
        """
        covs = self.base.copy()
        d = np.arange(6)
        covs[self.static[:, None], d, d] += self.walk * dts[self.static, None]
        poses = [s.pose for s in self.states]
        if self.vel.size:
            dt = dts[self.vel]
            steps = dt[:, None] * self.twist
            dR, dp = lie.se3_exp(steps)
            R, t = lie.se3_compose(self.R, self.t, dR, dp)
            A = np.concatenate([lie.se3_adjoint(*lie.se3_inverse(dR, dp)), lie.se3_right_jacobian(steps) * dt[:, None, None]], axis=2)
            cov = A @ self.C @ A.transpose(0, 2, 1)
            cov[:, d, d] += self.smooth * (dt**3 / 3.0)[:, None]
            covs[self.vel] = 0.5 * (cov + cov.transpose(0, 2, 1))
            for k, i in enumerate(self.vel):
                poses[i] = Pose(R[k], t[k])
        return poses, covs


def extrapolate_many(states, dts, noise: MotionNoise):
    """Batched :func:`extrapolate`; returns ``(poses, covariances (N, 6, 6))``."""
    return _Stack(states, noise).extrapolate(np.asarray(dts, dtype=float))


def extrapolate_covariance(state: TrackState, dt: float, noise: MotionNoise) -> np.ndarray:
    return extrapolate(state, dt, noise)[1]


@dataclass(frozen=True)
class Snapshot:
    """Read-only world model after a solve; safe to share between threads."""

    timestamp: float
    states: tuple
    gates: GateConfig
    noise: MotionNoise
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        # built eagerly so the first predict() after a solve stays cheap
        self._cache["stack"] = _Stack([s for s in self.states if s.constrained], self.noise)

    def extrapolated(self, now: float):
        """``(states, poses, covariances)`` of constrained tracks at ``now`` (cached per time)."""
        cache = self._cache
        if now not in cache:
            stack = cache["stack"]
            if len(cache) > 8:
                cache.clear()
                cache["stack"] = stack
            if stack.states:
                cache[now] = (stack.states, *stack.extrapolate(np.maximum(now - stack.times, 0.0)))
            else:
                cache[now] = ([], [], np.zeros((0, 6, 6)))
        return cache[now]

    def candidates(self, now: float) -> list:
        """Every constrained track extrapolated to ``now``, before gating.

        Returns ``(state, pose, volume_t, volume_r)`` tuples.
        """
        states, poses, covs = self.extrapolated(now)
        if not states:
            return []
        k = 4.0 / 3.0 * math.pi
        vt = k * np.sqrt(np.maximum(np.linalg.det(covs[:, :3, :3]), 0.0))
        vr = k * np.sqrt(np.maximum(np.linalg.det(covs[:, 3:, 3:]), 0.0))
        return [(s, p, float(a), float(b)) for s, p, a, b in zip(states, poses, vt, vr)]

    def predict(self, now: float, tau_pred_t=None, tau_pred_r=None) -> list:
        tau_t = self.gates.tau_pred_t if tau_pred_t is None else tau_pred_t
        tau_r = self.gates.tau_pred_r if tau_pred_r is None else tau_pred_r
        return select_predictions(self.candidates(now), tau_t, tau_r, now)


def select_predictions(candidates, tau_t, tau_r, now) -> list:
    """Apply the volume gates, then keep the most confident of overlapping same-label tracks."""
    passing = [c for c in candidates if c[2] < tau_t and c[3] < tau_r]
    passing.sort(key=lambda c: (c[2], c[0].track_id))
    kept = []
    for s, pose, vt, vr in passing:
        if any(k[0].label == s.label and lie.translation_distance(k[1], pose) < s.radius for k in kept):
            continue
        kept.append((s, pose, vt, vr))
    kept.sort(key=lambda c: c[0].track_id)
    return [Prediction(s.track_id, s.label, pose, vt, vr, now) for s, pose, vt, vr in kept]


class Tracker:
    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.graph = FactorGraph()
        self.tracks: dict[int, Track] = {}
        self.retired: list[Track] = []
        self.cameras: list = []  # (timestamp, variable id)
        self.last_time: float | None = None
        self._next_track = 0
        self._snapshot: Snapshot | None = None

    # -- public API -------------------------------------------------------------

    @property
    def snapshot(self) -> Snapshot | None:
        return self._snapshot

    def active_tracks(self) -> list:
        return [self.tracks[k] for k in sorted(self.tracks)]

    def ingest(self, frame: Frame) -> SolveReport:
        cfg = self.config
        t = float(frame.timestamp)
        if self.last_time is not None and t <= self.last_time:
            raise OutOfOrderFrameError(f"frame at t={t} does not follow t={self.last_time}")

        cam = self.graph.add_variable(POSE, frame.camera, t, owner="camera")
        self.graph.add_factor(CameraFactor(cam, frame.camera, cfg.camera_noise.covariance()))
        self.cameras.append((t, cam))

        assignments = []
        taken = set()
        for det in frame.detections:
            tid = self.associate(det, frame.camera, t, exclude=taken)
            if tid is not None:
                taken.add(tid)
            assignments.append(tid)

        for track in self.active_tracks():
            self._extend(track, t)

        for det, tid in zip(frame.detections, assignments):
            if tid is None:
                track = self._spawn(det, frame.camera, t)
            else:
                track = self.tracks[tid]
            cov = measurement_covariance(det.pose, det.n_px, cfg.cov_model)
            self.graph.add_factor(ObjectFactor((track.latest_pose, cam), det.pose, cov, n_px=det.n_px))
            track.last_detection = t
            track.n_detections += 1

        self._retire(t)
        self.graph.apply_window(cfg.gates.horizon, t, cfg.window_mode)
        self._prune()
        if cfg.window_mode == "delete":
            self._reanchor(t)
        report = self.graph.solve(cfg.solver)
        self.last_time = t
        self._snapshot = self._export(t)
        return report

    def associate(self, det: Detection, camera: Pose, now: float, exclude=()) -> int | None:
        """Track id for ``det`` or ``None`` when a new track should be spawned.

        Candidates must pass the outlier gates; the Mahalanobis-closest of
        them wins. Scoring first would let a stale, very uncertain track
        claim the detection, fail the gate and force a spawn.
        """
        snap = self._snapshot
        if snap is None:
            return None
        gates = self.config.gates
        measured = camera @ det.pose
        meas_cov = measurement_covariance(det.pose, det.n_px, self.config.cov_model)
        states, poses, covs = snap.extrapolated(now)
        predicted = {s.track_id: (p, c) for s, p, c in zip(states, poses, covs)}
        best = None
        for s in snap.states:
            if s.label != det.label or s.track_id in exclude or s.track_id not in self.tracks:
                continue
            if s.track_id in predicted:
                pose, cov = predicted[s.track_id]
                S = cov + meas_cov if self.config.association_covariance == "joint" else meas_cov
            else:
                pose, S = s.pose, meas_cov
            if lie.translation_distance(pose, measured) >= gates.tau_outlier_t:
                continue
            if lie.rotation_angle(pose.R.T @ measured.R) >= gates.tau_outlier_r:
                continue
            r = lie.log_se3(lie.between(pose, measured))
            score = float(r @ np.linalg.solve(S, r))
            if best is None or score < best[0]:
                best = (score, s.track_id)
        return None if best is None else best[1]

    def predict(self, now: float | None = None) -> list:
        snap = self._snapshot
        if snap is None:
            return []
        return snap.predict(snap.timestamp if now is None else now)

    # -- internals --------------------------------------------------------------

    def _extend(self, track: Track, t: float):
        cfg = self.config
        prev_T = track.latest_pose
        prev_t = track.poses[-1][0]
        dt = t - prev_t
        T_prev = self.graph.value(prev_T)
        if track.motion_model == CONST_POSE:
            cur = self.graph.add_variable(POSE, T_prev, t, owner=f"track{track.id}")
            self.graph.add_factor(ConstantPoseFactor((prev_T, cur), constant_pose_cov(cfg.motion_noise, dt)))
        else:
            prev_x = track.latest_twist
            x = self.graph.value(prev_x)
            cur = self.graph.add_variable(POSE, integrate(T_prev, x, dt), t, owner=f"track{track.id}")
            cur_x = self.graph.add_variable(VECTOR, x.copy(), t, owner=f"track{track.id}")
            self.graph.add_factor(TwistSmoothnessFactor((prev_x, cur_x), twist_smoothness_cov(cfg.motion_noise, dt)))
            self.graph.add_factor(IntegrationFactor((prev_T, cur, cur_x), dt, integration_cov(cfg.motion_noise, dt)))
            track.twists.append((t, cur_x))
        track.poses.append((t, cur))

    def _spawn(self, det: Detection, camera: Pose, t: float) -> Track:
        cfg = self.config
        track = Track(
            id=self._next_track,
            label=det.label,
            radius=cfg.radius(det.label),
            motion_model=cfg.motion_model,
            created=t,
            last_detection=t,
        )
        self._next_track += 1
        owner = f"track{track.id}"
        pose = self.graph.add_variable(POSE, camera @ det.pose, t, owner=owner)
        track.poses.append((t, pose))
        if track.motion_model == CONST_VEL:
            x = self.graph.add_variable(VECTOR, np.zeros(6), t, owner=owner)
            self.graph.add_factor(VectorPriorFactor(x, np.zeros(6), twist_prior_cov(cfg.motion_noise)))
            track.twists.append((t, x))
            track.twist_anchor = x
        self.tracks[track.id] = track
        return track

    def _retire(self, t: float):
        limit = self.config.retire_time
        for track in self.active_tracks():
            if t - track.last_detection > limit + 1e-9:
                self._drop(track, t)

    def _drop(self, track: Track, t: float):
        ids = [v for _, v in track.poses + track.twists if v in self.graph.variables]
        if self.config.window_mode == "prior":
            self.graph.marginalize(ids)
        else:
            self.graph.remove_variables(ids)
        track.retired = True
        self.retired.append(self.tracks.pop(track.id))
        log.info("retired track %d (%s) at t=%.3f", track.id, track.label, t)

    def _reanchor(self, t: float):
        """Keep delete-mode tracks well posed after their oldest states were dropped.

        A track with no detection left in the window has nothing tying it to
        the world and is retired. A constant-velocity track whose twist prior
        was deleted gets the same weak prior again, centred on the current
        estimate of its oldest remaining twist.
        """
        for track in self.active_tracks():
            detected = {v for ts, v in track.poses if ts == track.last_detection}
            if not detected:
                self._drop(track, t)
                continue
            if track.twists and track.twist_anchor not in self.graph.variables:
                x = track.twists[0][1]
                prior = twist_prior_cov(self.config.motion_noise)
                self.graph.add_factor(VectorPriorFactor(x, self.graph.value(x).copy(), prior))
                track.twist_anchor = x

    def _prune(self):
        alive = self.graph.variables
        for track in self.tracks.values():
            track.poses = [p for p in track.poses if p[1] in alive]
            track.twists = [p for p in track.twists if p[1] in alive]
        self.cameras = [c for c in self.cameras if c[1] in alive]

    def _export(self, t: float) -> Snapshot:
        tracks = self.active_tracks()
        blocks = [[tr.latest_pose] + ([tr.latest_twist] if tr.twists else []) for tr in tracks]
        try:
            covs = self.graph.joint_marginals(blocks)
        except SingularInformationError as exc:
            log.warning("marginal covariance unavailable at t=%.3f: %s", t, exc)
            covs = [None] * len(tracks)
        states = []
        for tr, cov in zip(tracks, covs):
            twist = self.graph.value(tr.latest_twist).copy() if tr.twists else None
            if twist is not None:
                twist.setflags(write=False)
            if cov is not None:
                cov.setflags(write=False)
            states.append(
                TrackState(
                    track_id=tr.id,
                    label=tr.label,
                    radius=tr.radius,
                    motion_model=tr.motion_model,
                    timestamp=tr.poses[-1][0],
                    pose=self.graph.value(tr.latest_pose),
                    twist=twist,
                    covariance=cov,
                    last_detection=tr.last_detection,
                    n_detections=tr.n_detections,
                )
            )
        return Snapshot(t, tuple(states), replace(self.config.gates), self.config.motion_noise)
