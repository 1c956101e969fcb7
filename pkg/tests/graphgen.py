"""Random factor graphs built twice: in the package and in the dense oracle."""

import numpy as np

from posefg import lie
from posefg.factors import IntegrationFactor, TwistSmoothnessFactor
from posefg.graph import POSE, VECTOR, BetweenFactor, FactorGraph, PriorFactor, VectorPriorFactor

from oracles import DenseProblem, exp4, inv4, log4


def _spd(rng, d, lo, hi):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return Q @ np.diag(rng.uniform(lo, hi, size=d)) @ Q.T


def random_graph(rng, max_vars=12):
    """Pose chain with loop closures and an optional twist chain.

    Returns ``(graph, dense, ids)`` where ``ids`` maps oracle keys to graph ids.
    """
    n_pose = int(rng.integers(2, 7))
    with_twist = bool(rng.integers(0, 2)) and 2 * n_pose <= max_vars
    truth = [lie.random_pose(rng, max_angle=2.0, max_translation=2.0)]
    twists = [0.3 * rng.normal(size=6) for _ in range(n_pose)]
    dt = 0.2
    for i in range(1, n_pose):
        truth.append(truth[-1] @ lie.exp_se3(dt * twists[i]) if with_twist else truth[-1] @ lie.random_pose(rng, 0.8, 0.5))

    g = FactorGraph()
    values, kinds, ids = {}, {}, {}

    def noisy(T, s):
        return T @ lie.exp_se3(s * rng.normal(size=6))

    for i, T in enumerate(truth):
        init = noisy(T, 0.1)
        ids[("p", i)] = g.add_variable(POSE, init, timestamp=i * dt)
        values[("p", i)] = init.matrix()
        kinds[("p", i)] = "pose"
    if with_twist:
        for i, x in enumerate(twists):
            init = x + 0.05 * rng.normal(size=6)
            ids[("x", i)] = g.add_variable(VECTOR, init, timestamp=i * dt)
            values[("x", i)] = init
            kinds[("x", i)] = "vector"
    dense = DenseProblem(values, kinds)

    def add_prior(i, cov):
        M = noisy(truth[i], 0.05)
        g.add_factor(PriorFactor(ids[("p", i)], M, cov))
        Mm = M.matrix()
        dense.add([("p", i)], lambda T, Mm=Mm: log4(inv4(T) @ Mm), np.linalg.cholesky(np.linalg.inv(cov)).T)

    def add_between(i, j, cov):
        Z = noisy(lie.between(truth[i], truth[j]), 0.05)
        g.add_factor(BetweenFactor((ids[("p", i)], ids[("p", j)]), Z, cov))
        Zm = Z.matrix()
        dense.add([("p", i), ("p", j)], lambda A, B, Zm=Zm: log4(inv4(Zm) @ inv4(A) @ B), np.linalg.cholesky(np.linalg.inv(cov)).T)

    add_prior(0, _spd(rng, 6, 0.01, 0.05))
    if with_twist:
        for i in range(1, n_pose):
            cov = _spd(rng, 6, 0.001, 0.01)
            g.add_factor(IntegrationFactor((ids[("p", i - 1)], ids[("p", i)], ids[("x", i)]), dt, cov))
            dense.add(
                [("p", i - 1), ("p", i), ("x", i)],
                lambda Tp, Tc, x: log4(inv4(Tc) @ Tp @ exp4(dt * x)),
                np.linalg.cholesky(np.linalg.inv(cov)).T,
            )
            cov = _spd(rng, 6, 0.01, 0.1)
            g.add_factor(TwistSmoothnessFactor((ids[("x", i - 1)], ids[("x", i)]), cov))
            dense.add([("x", i - 1), ("x", i)], lambda a, b: b - a, np.linalg.cholesky(np.linalg.inv(cov)).T)
        cov = _spd(rng, 6, 0.05, 0.2)
        mean = twists[0] + 0.05 * rng.normal(size=6)
        g.add_factor(VectorPriorFactor(ids[("x", 0)], mean, cov))
        dense.add([("x", 0)], lambda x, mean=mean: mean - x, np.linalg.cholesky(np.linalg.inv(cov)).T)
        # the integration residual leaves the first twist weakly observed; measure poses too
        for i in range(1, n_pose):
            add_prior(i, _spd(rng, 6, 0.01, 0.05))
    else:
        for i in range(1, n_pose):
            add_between(i - 1, i, _spd(rng, 6, 0.001, 0.02))
        for _ in range(int(rng.integers(0, 3))):
            i, j = sorted(rng.choice(n_pose, size=2, replace=False))
            add_between(int(i), int(j), _spd(rng, 6, 0.005, 0.05))
        if rng.integers(0, 2):
            add_prior(n_pose - 1, _spd(rng, 6, 0.01, 0.05))
    return g, dense, ids


def compare(g, dense, ids):
    """Largest solution and marginal-covariance discrepancy against the oracle."""
    ref, cov = dense.solve()
    keys = dense.order
    sol_err = 0.0
    for k in keys:
        v = g.value(ids[k])
        if dense.kinds[k] == "pose":
            sol_err = max(sol_err, np.abs(log4(inv4(ref[k]) @ v.matrix())).max())
        else:
            sol_err = max(sol_err, np.abs(ref[k] - v).max())
    # joint_marginals keeps the requested order, which is the oracle's
    margs = g.joint_marginals([[ids[k] for k in keys]])[0]
    return sol_err, float(np.abs(margs - cov).max())
