"""Analytic-vs-central-difference Jacobian check for every factor kind."""

import numpy as np

from posefg import lie
from posefg.factors import (
    CameraFactor,
    ConstantPoseFactor,
    IntegrationFactor,
    ObjectFactor,
    TwistSmoothnessFactor,
)
from posefg.graph import POSE, BetweenFactor, Factor, LinearPriorFactor, PriorFactor, VectorPriorFactor

STEP = 1e-6


def _random_value(rng, kind, dim=6):
    if kind == POSE:
        return lie.random_pose(rng, max_angle=2.5, max_translation=2.0)
    return rng.normal(size=dim)


def _near(rng, T, scale):
    return T @ lie.exp_se3(scale * rng.normal(size=6))


def make_factor(kind, rng):
    """A factor of ``kind`` and values placed so residuals stay away from the log branch cut."""
    cov = np.eye(6)
    if kind == "pose_prior":
        T = _random_value(rng, POSE)
        return PriorFactor(0, _near(rng, T, 0.7), cov), {0: T}
    if kind == "camera":
        T = _random_value(rng, POSE)
        return CameraFactor(0, _near(rng, T, 0.7), cov), {0: T}
    if kind == "vector_prior":
        d = int(rng.integers(1, 7))
        return VectorPriorFactor(0, rng.normal(size=d), np.eye(d)), {0: rng.normal(size=d)}
    if kind == "pose_between":
        A, B = _random_value(rng, POSE), _random_value(rng, POSE)
        return BetweenFactor((0, 1), _near(rng, lie.between(A, B), 0.7), cov), {0: A, 1: B}
    if kind == "const_pose":
        A = _random_value(rng, POSE)
        return ConstantPoseFactor((0, 1), cov), {0: A, 1: _near(rng, A, 0.7)}
    if kind == "object":
        To, Tc = _random_value(rng, POSE), _random_value(rng, POSE)
        meas = _near(rng, lie.between(Tc, To), 0.7)
        return ObjectFactor((0, 1), meas, cov, n_px=1000), {0: To, 1: Tc}
    if kind == "twist_smoothness":
        return TwistSmoothnessFactor((0, 1), cov), {0: rng.normal(size=6), 1: rng.normal(size=6)}
    if kind == "integration":
        dt = float(rng.uniform(0.01, 0.5))
        Tp = _random_value(rng, POSE)
        x = rng.normal(size=6)
        Tc = _near(rng, Tp @ lie.exp_se3(dt * x), 0.5)
        return IntegrationFactor((0, 1, 2), dt, cov), {0: Tp, 1: Tc, 2: x}
    if kind == "linear_prior":
        lin = [_random_value(rng, POSE), rng.normal(size=6)]
        values = {0: _near(rng, lin[0], 0.7), 1: lin[1] + rng.normal(size=6)}
        W = rng.normal(size=(12, 12)) + 4 * np.eye(12)
        return LinearPriorFactor((0, 1), (POSE, "vector"), lin, W, rng.normal(size=12)), values
    raise KeyError(kind)


FACTOR_KINDS = sorted(Factor.registry)


def _perturb(v, kind, d):
    return v @ lie.exp_se3(d) if kind == POSE else v + d


def check(kind, rng):
    """Largest absolute elementwise error between analytic and numeric Jacobians."""
    f, values = make_factor(kind, rng)
    kinds = getattr(f, "kinds", f.key_kinds)
    analytic = f.jacobians(values)
    worst = 0.0
    for i, (key, k) in enumerate(zip(f.keys, kinds)):
        dim = 6 if k == POSE else np.size(values[key])
        num = np.zeros((f.residual_dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = STEP
            vp, vm = dict(values), dict(values)
            vp[key] = _perturb(values[key], k, e)
            vm[key] = _perturb(values[key], k, -e)
            num[:, j] = (f.residual(vp) - f.residual(vm)) / (2 * STEP)
        worst = max(worst, float(np.abs(num - analytic[i]).max()))
    return worst
