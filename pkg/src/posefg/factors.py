"""Residuals, noise models and factor classes for object pose smoothing.

Residual conventions (all are ``Log`` of a relative transform, translation first):

* camera:        ``Log(T_C^-1 * Tm_C)``
* object:        ``Log(T_O^-1 * T_C * Tm_CO)``
* constant pose: ``Log(T_prev^-1 * T_cur)``
* integration:   ``Log(T_cur^-1 * T_prev * Exp(dt * x_cur))``
* smoothness:    ``x_cur - x_prev``

where ``Tm`` denotes a measurement and ``x`` a body-frame twist.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import lie
from .graph import (
    POSE,
    VECTOR,
    BetweenFactor,
    Factor,
    PriorFactor,
    _stack_attr_poses,
    _key_poses,
    _key_vectors,
)
from .lie import Pose


@dataclass
class CameraNoise:
    sigma_ct: float = 0.002
    sigma_cr: float = math.radians(0.2)

    def __post_init__(self):
        if self.sigma_ct <= 0 or self.sigma_cr <= 0:
            raise ValueError("camera noise standard deviations must be positive")

    def covariance(self) -> np.ndarray:
        return np.diag([self.sigma_ct**2] * 3 + [self.sigma_cr**2] * 3)


@dataclass
class SigmaModel:
    """``sigma(n_px) = a * exp(-b * n_px)``."""

    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("sigma model needs a > 0")
        if self.b < 0:
            raise ValueError("sigma model needs b >= 0")

    def __call__(self, n_px):
        return sigma(n_px, self.a, self.b)


@dataclass
class CovModelParams:
    xy: SigmaModel = field(default_factory=lambda: SigmaModel(0.01, 5e-4))
    z: SigmaModel = field(default_factory=lambda: SigmaModel(0.04, 5e-4))
    rot: SigmaModel = field(default_factory=lambda: SigmaModel(0.05, 5e-4))
    decoupled: bool = True
    visibility_dependent: bool = True
    ray_aligned: bool = True

    def sigmas(self, n_px):
        """Standard deviations ``(xy, z, rot)`` after applying the variant flags."""
        if self.visibility_dependent:
            s = (self.xy(n_px), self.z(n_px), self.rot(n_px))
        else:
            s = (self.xy.a, self.z.a, self.rot.a)
        if not self.decoupled:
            s = (s[0], s[0], s[2])
        return s

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("xy", "z", "rot"):
            if k in d and not isinstance(d[k], SigmaModel):
                v = d[k]
                d[k] = SigmaModel(**v) if isinstance(v, dict) else SigmaModel(*v)
        return cls(**d)


@dataclass
class MotionNoise:
    sigma_mt: float = 0.01
    sigma_mr: float = 0.02
    sigma_vt: float = 0.1
    sigma_vr: float = 0.3
    integration_var: float = 1e-6
    twist_prior_t: float = 0.1
    twist_prior_r: float = 0.3

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ValueError("motion noise parameters must be positive")

    def to_dict(self):
        return asdict(self)


def sigma(n_px, a, b):
    return a * np.exp(-b * np.asarray(n_px, dtype=float))


def ray_frame(t_co) -> np.ndarray:
    """Rotation ``R_CC'`` whose third column points from the camera to ``t_co``."""
    t_co = np.asarray(t_co, dtype=float)
    d = np.linalg.norm(t_co)
    if d < 1e-9:
        raise ValueError("degenerate viewing ray: object centre at the camera origin")
    z = t_co / d
    helper = np.eye(3)[np.argmin(np.abs(z))]
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def measurement_covariance(T_co: Pose, n_px, params: CovModelParams) -> np.ndarray:
    """6x6 covariance of an object pose measurement, expressed in the object frame.

    Translation variance is larger along the viewing ray; rotation variance
    is isotropic. Both depend on the number of visible pixels.
    """
    if params.visibility_dependent and n_px < 1:
        raise ValueError("n_px must be >= 1")
    s_xy, s_z, s_r = params.sigmas(n_px)
    R_cc = ray_frame(T_co.t) if params.ray_aligned else np.eye(3)
    if not params.ray_aligned and np.linalg.norm(T_co.t) < 1e-9:
        raise ValueError("degenerate viewing ray: object centre at the camera origin")
    R_oc = T_co.R.T @ R_cc
    cov = np.zeros((6, 6))
    cov[:3, :3] = R_oc @ np.diag([s_xy**2, s_xy**2, s_z**2]) @ R_oc.T
    cov[3:, 3:] = np.eye(3) * s_r**2
    return 0.5 * (cov + cov.T)


def camera_residual(T_c: Pose, T_c_meas: Pose) -> np.ndarray:
    return lie.log_se3(lie.between(T_c, T_c_meas))


def object_residual(T_o: Pose, T_c: Pose, T_co_meas: Pose) -> np.ndarray:
    return lie.log_se3(lie.between(T_o, T_c @ T_co_meas))


def constant_pose_residual(T_prev: Pose, T_cur: Pose) -> np.ndarray:
    return lie.log_se3(lie.between(T_prev, T_cur))


def _check_dt(dt):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")


def constant_pose_cov(noise: MotionNoise, dt) -> np.ndarray:
    _check_dt(dt)
    return np.diag([noise.sigma_mt**2] * 3 + [noise.sigma_mr**2] * 3) * dt


def twist_smoothness_cov(noise: MotionNoise, dt) -> np.ndarray:
    _check_dt(dt)
    return np.diag([noise.sigma_vt**2] * 3 + [noise.sigma_vr**2] * 3) * dt


def integration_cov(noise: MotionNoise, dt) -> np.ndarray:
    _check_dt(dt)
    return np.eye(6) * noise.integration_var * dt


def twist_prior_cov(noise: MotionNoise) -> np.ndarray:
    return np.diag([noise.twist_prior_t**2] * 3 + [noise.twist_prior_r**2] * 3)


def integrate(T: Pose, twist, dt) -> Pose:
    """Pose after moving with a constant body twist for ``dt`` seconds."""
    return T @ lie.exp_se3(dt * np.asarray(twist, dtype=float))


def constant_velocity_residuals(T_prev: Pose, T_cur: Pose, x_prev, x_cur, dt):
    """``(smoothness, integration)`` residuals of the constant-velocity model."""
    _check_dt(dt)
    smooth = np.asarray(x_cur, dtype=float) - np.asarray(x_prev, dtype=float)
    return smooth, lie.log_se3(lie.between(T_cur, integrate(T_prev, x_cur, dt)))


class SigmaFit(NamedTuple):
    a: float
    b: float
    fallback: bool


def fit_sigma_model(samples, n_bins: int = 10) -> SigmaFit:
    """Fit ``sigma(n) = a exp(-b n)`` to ``(n_px, error)`` samples.

    Samples are binned by pixel count (equal-population bins, or one bin per
    distinct count when there are at most ``n_bins`` of them). Each bin gives
    an RMS error; ``log(rms)`` is then fitted linearly in the bin's mean count.
    If fewer than two usable bins exist, ``b = 0`` and ``a`` is the pooled RMS.
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 2:
        raise ValueError("need at least two (n_px, error) samples")
    n, err = data[:, 0], data[:, 1]
    if np.any(n < 0) or not np.all(np.isfinite(data)):
        raise ValueError("n_px must be non-negative and samples finite")
    pooled = float(np.sqrt(np.mean(err**2)))

    order = np.argsort(n, kind="stable")
    uniq = np.unique(n)
    if len(uniq) <= n_bins:
        bins = [np.flatnonzero(n == u) for u in uniq]
    else:
        bins = np.array_split(order, n_bins)
    centers = np.array([n[b].mean() for b in bins])
    rms = np.array([np.sqrt(np.mean(err[b] ** 2)) for b in bins])
    usable = rms > 0
    if usable.sum() < 2 or np.ptp(centers[usable]) == 0:
        if pooled <= 0:
            raise ValueError("all errors are zero; cannot fit a positive sigma")
        return SigmaFit(pooled, 0.0, True)
    slope, intercept = np.polyfit(centers[usable], np.log(rms[usable]), 1)
    if slope > 0:
        return SigmaFit(pooled, 0.0, True)
    return SigmaFit(float(np.exp(intercept)), float(-slope), False)


class CameraFactor(PriorFactor):
    kind = "camera"


class ObjectFactor(Factor):
    """Object pose measured from a camera: keys ``(object, camera)``."""

    kind = "object"
    key_kinds = (POSE, POSE)

    def __init__(self, keys, measured: Pose, covariance=None, sqrt_info=None, n_px=None):
        super().__init__(keys, covariance, sqrt_info)
        self.measured = measured if isinstance(measured, Pose) else Pose.from_dict(measured)
        self.n_px = n_px

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        Ro, to = _key_poses(values, factors, 0)
        Rc, tc = _key_poses(values, factors, 1)
        Rm, tm = _stack_attr_poses(factors, "measured")
        Rb, tb = lie.se3_compose(Rc, tc, Rm, tm)
        Rx, tx = lie.se3_between(Ro, to, Rb, tb)
        r = lie.se3_log(Rx, tx)
        if not jacobians:
            return r, None
        Jinv = lie.se3_right_jacobian_inv(r)
        Rxi, txi = lie.se3_inverse(Rx, tx)
        Rmi, tmi = lie.se3_inverse(Rm, tm)
        return r, [-Jinv @ lie.se3_adjoint(Rxi, txi), Jinv @ lie.se3_adjoint(Rmi, tmi)]

    def params(self):
        return {"measured": self.measured.to_dict(), "n_px": self.n_px}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys, Pose.from_dict(params["measured"]), covariance, sqrt_info, params.get("n_px"))


class ConstantPoseFactor(BetweenFactor):
    """Penalizes pose change between consecutive states: keys ``(prev, cur)``."""

    kind = "const_pose"

    def __init__(self, keys, covariance=None, sqrt_info=None, measured=None):
        super().__init__(keys, None, covariance, sqrt_info)

    def params(self):
        return {}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys, covariance, sqrt_info)


class TwistSmoothnessFactor(Factor):
    """``x_cur - x_prev``: keys ``(x_prev, x_cur)``."""

    kind = "twist_smoothness"
    key_kinds = (VECTOR, VECTOR)

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        xp = _key_vectors(values, factors, 0)
        xc = _key_vectors(values, factors, 1)
        r = xc - xp
        if not jacobians:
            return r, None
        n = len(factors)
        return r, [np.broadcast_to(-np.eye(6), (n, 6, 6)), np.broadcast_to(np.eye(6), (n, 6, 6))]


class IntegrationFactor(Factor):
    """Links consecutive poses through the current twist: keys ``(T_prev, T_cur, x_cur)``."""

    kind = "integration"
    key_kinds = (POSE, POSE, VECTOR)

    def __init__(self, keys, dt, covariance=None, sqrt_info=None):
        _check_dt(dt)
        super().__init__(keys, covariance, sqrt_info)
        self.dt = float(dt)

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        Rp, tp = _key_poses(values, factors, 0)
        Rc, tc = _key_poses(values, factors, 1)
        x = _key_vectors(values, factors, 2)
        dt = np.array([f.dt for f in factors])
        step = dt[:, None] * x
        Re, te = lie.se3_exp(step)
        Rb, tb = lie.se3_compose(Rp, tp, Re, te)
        Rx, tx = lie.se3_between(Rc, tc, Rb, tb)
        r = lie.se3_log(Rx, tx)
        if not jacobians:
            return r, None
        Jinv = lie.se3_right_jacobian_inv(r)
        Rxi, txi = lie.se3_inverse(Rx, tx)
        Rei, tei = lie.se3_inverse(Re, te)
        J_prev = Jinv @ lie.se3_adjoint(Rei, tei)
        J_cur = -Jinv @ lie.se3_adjoint(Rxi, txi)
        J_x = (Jinv @ lie.se3_right_jacobian(step)) * dt[:, None, None]
        return r, [J_prev, J_cur, J_x]

    def params(self):
        return {"dt": self.dt}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys, params["dt"], covariance, sqrt_info)
