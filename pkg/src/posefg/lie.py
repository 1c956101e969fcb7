"""SO(3)/SE(3) group operations.

Conventions used throughout the package:

* A pose ``T_AB = (R, t)`` maps points from frame B to frame A: ``p_A = R p_B + t``.
* Tangent vectors are 6-vectors ordered translation first, ``(rho, theta)``.
* Perturbations are applied on the right, ``T <- T * Exp(delta)``, so residuals
  of the form ``Log(A^-1 B)`` have standard right-Jacobians.

The array-level functions (``exp_so3``, ``log_so3``, ``se3_exp``, ``se3_log``,
...) accept arbitrary leading batch dimensions; the factor code relies on that
to linearize many factors with a handful of numpy calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

SMALL_ANGLE = 1e-5
# Higher-order Jacobian coefficients lose precision well above SMALL_ANGLE.
_SERIES_ANGLE = 1e-2
BRANCH_TOL = 1e-7


class BranchAmbiguityError(ValueError):
    """Raised by ``log_se3(..., strict=True)`` when the rotation angle is ~pi."""


def _mv(A, b):
    """Batched matrix-vector product."""
    return (A @ b[..., None])[..., 0]


def hat(v):
    """so(3) hat operator, ``(..., 3) -> (..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(M):
    M = np.asarray(M, dtype=float)
    return np.stack([M[..., 2, 1], M[..., 0, 2], M[..., 1, 0]], axis=-1)


def _angle(phi):
    return np.sqrt(np.sum(phi * phi, axis=-1))


def _coeffs(theta, exact, series, threshold):
    """Evaluate ``exact(theta)`` with a Taylor fallback below ``threshold``."""
    small = theta < threshold
    safe = np.where(small, 1.0, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = exact(safe)
    return np.where(small, series(theta), full)


def _sinc(theta):  # sin(t)/t
    return _coeffs(theta, lambda t: np.sin(t) / t, lambda t: 1.0 - t * t / 6.0, SMALL_ANGLE)


def _cosc(theta):  # (1 - cos t)/t^2
    return _coeffs(
        theta, lambda t: (1.0 - np.cos(t)) / (t * t), lambda t: 0.5 - t * t / 24.0, SMALL_ANGLE
    )


def _sinc3(theta):  # (t - sin t)/t^3
    return _coeffs(
        theta,
        lambda t: (t - np.sin(t)) / t**3,
        lambda t: 1.0 / 6.0 - t**2 / 120.0 + t**4 / 5040.0,
        _SERIES_ANGLE,
    )


def _inv_coeff(theta):  # (1 - (t/2) cot(t/2)) / t^2, used by J^-1
    return _coeffs(
        theta,
        lambda t: (1.0 - 0.5 * t / np.tan(0.5 * t)) / (t * t),
        lambda t: 1.0 / 12.0 + t**2 / 720.0 + t**4 / 30240.0,
        _SERIES_ANGLE,
    )


def _q3(theta):  # (t^2 + 2 cos t - 2) / (2 t^4)
    return _coeffs(
        theta,
        lambda t: (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
        lambda t: 1.0 / 24.0 - t**2 / 720.0 + t**4 / 40320.0,
        _SERIES_ANGLE,
    )


def _q4(theta):  # (2t - 3 sin t + t cos t) / (2 t^5)
    return _coeffs(
        theta,
        lambda t: (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
        lambda t: 1.0 / 120.0 - t**2 / 2520.0 + t**4 / 120960.0,
        _SERIES_ANGLE,
    )


def _expand(c):
    return np.asarray(c)[..., None, None]


def exp_so3(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    K = hat(phi)
    return np.eye(3) + _expand(_sinc(theta)) * K + _expand(_cosc(theta)) * (K @ K)


def log_so3(R):
    """Rotation vector of ``R`` with angle in ``[0, pi]``.

    At exactly pi the axis sign is arbitrary; either branch is returned.
    """
    R = np.asarray(R, dtype=float)
    s = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    sin_t = _angle(s)
    cos_t = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arctan2(sin_t, cos_t)

    # Regular branch: phi = theta / sin(theta) * s.
    small = sin_t < SMALL_ANGLE
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, sin_t))
    phi = scale[..., None] * s

    # Near pi, s carries almost no information; recover the axis from the
    # symmetric part (1 - cos) a a^T instead.
    near_pi = cos_t < -0.9
    if np.any(near_pi):
        B = 0.5 * (R + np.swapaxes(R, -1, -2)) - cos_t[..., None, None] * np.eye(3)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        idx = np.argmax(diag, axis=-1)
        col = np.take_along_axis(B, idx[..., None, None], axis=-1)[..., 0]
        dmax = np.take_along_axis(diag, idx[..., None], axis=-1)[..., 0]
        axis = col / np.sqrt(np.maximum(dmax * (1.0 - cos_t), 1e-300))[..., None]
        axis = axis / _angle(axis)[..., None]
        sign = np.where(np.sum(axis * s, axis=-1) < 0.0, -1.0, 1.0)
        phi = np.where(near_pi[..., None], (sign * theta)[..., None] * axis, phi)
    return phi


def left_jacobian_so3(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    K = hat(phi)
    return np.eye(3) + _expand(_cosc(theta)) * K + _expand(_sinc3(theta)) * (K @ K)


def left_jacobian_inv_so3(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    K = hat(phi)
    return np.eye(3) - 0.5 * K + _expand(_inv_coeff(theta)) * (K @ K)


def right_jacobian_so3(phi):
    return left_jacobian_so3(-np.asarray(phi, dtype=float))


def right_jacobian_inv_so3(phi):
    return left_jacobian_inv_so3(-np.asarray(phi, dtype=float))


def _q_matrix(rho, phi):
    """Off-diagonal block of the SE(3) left Jacobian."""
    theta = _angle(phi)
    P = hat(phi)
    X = hat(rho)
    PX = P @ X
    XP = X @ P
    PXP = PX @ P
    PP = P @ P
    return (
        0.5 * X
        + _expand(_sinc3(theta)) * (PX + XP + PXP)
        + _expand(_q3(theta)) * (PP @ X + XP @ P - 3.0 * PXP)
        + _expand(_q4(theta)) * (PXP @ P + P @ PXP)
    )


def se3_exp(xi):
    """``(..., 6) -> (R (..., 3, 3), t (..., 3))``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    R = exp_so3(phi)
    t = _mv(left_jacobian_so3(phi), rho)
    return R, t


def se3_log(R, t):
    phi = log_so3(R)
    rho = _mv(left_jacobian_inv_so3(phi), np.asarray(t, dtype=float))
    return np.concatenate([rho, phi], axis=-1)


def se3_right_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    return se3_left_jacobian(-xi)


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    J = left_jacobian_so3(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = _q_matrix(rho, phi)
    return out


def se3_right_jacobian_inv(xi):
    """Inverse right Jacobian, the derivative of ``Log(X Exp(d))`` at ``d = 0``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = -xi[..., :3], -xi[..., 3:]
    Jinv = left_jacobian_inv_so3(phi)
    Q = _q_matrix(rho, phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., :3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_adjoint(R, t):
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = hat(t) @ R
    return out


def se3_inverse(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -_mv(Rt, t)


def se3_compose(Ra, ta, Rb, tb):
    return Ra @ Rb, _mv(Ra, tb) + ta


def se3_between(Ra, ta, Rb, tb):
    """``A^-1 B`` on raw arrays."""
    Rai, tai = se3_inverse(Ra, ta)
    return se3_compose(Rai, tai, Rb, tb)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a 3x3 rotation matrix and a translation in meters."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> Pose:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quat(cls, q_wxyz, t) -> Pose:
        w, x, y, z = q_wxyz
        return cls(_ScipyRotation.from_quat([x, y, z, w]).as_matrix(), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> Pose:
        return cls(exp_so3(rotvec), t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def quat(self) -> np.ndarray:
        """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
        x, y, z, w = _ScipyRotation.from_matrix(self.R).as_quat()
        q = np.array([w, x, y, z])
        return -q if w < 0 else q

    def inverse(self) -> Pose:
        return Pose(*se3_inverse(self.R, self.t))

    def compose(self, other: Pose) -> Pose:
        return Pose(*se3_compose(self.R, self.t, other.R, other.t))

    __matmul__ = compose

    def act(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {"t": [float(v) for v in self.t], "q": [float(v) for v in self.quat()]}

    @classmethod
    def from_dict(cls, d) -> Pose:
        return cls.from_quat(d["q"], d["t"])

    def allclose(self, other: Pose, atol=1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=4)}, rotvec={np.array2string(log_so3(self.R), precision=4)})"


def compose(A: Pose, B: Pose) -> Pose:
    return A.compose(B)


def inverse(T: Pose) -> Pose:
    return T.inverse()


def between(A: Pose, B: Pose) -> Pose:
    """``A^-1 * B``."""
    return Pose(*se3_between(A.R, A.t, B.R, B.t))


def exp_se3(x) -> Pose:
    return Pose(*se3_exp(np.asarray(x, dtype=float).reshape(6)))


def is_branch_ambiguous(R) -> bool:
    return bool(rotation_angle(R) > np.pi - BRANCH_TOL)


def log_se3(T: Pose, strict: bool = False) -> np.ndarray:
    """Tangent vector ``(rho, theta)`` of ``T``.

    With ``strict`` the call raises ``BranchAmbiguityError`` when the rotation
    angle is within ``BRANCH_TOL`` of pi, where the sign of the axis is
    undetermined. Otherwise one of the two branches is returned.
    """
    if strict and is_branch_ambiguous(T.R):
        raise BranchAmbiguityError(f"rotation angle within {BRANCH_TOL} of pi")
    return se3_log(T.R, T.t)


def rotation_angle(R) -> float | np.ndarray:
    """Geodesic angle of a rotation matrix, in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    out = np.arctan2(_angle(s), c)
    return float(out) if out.ndim == 0 else out


def translation_distance(A: Pose, B: Pose) -> float:
    return float(np.linalg.norm(A.t - B.t))


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, max_translation: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(exp_so3(angle * axis), rng.uniform(-max_translation, max_translation, size=3))
