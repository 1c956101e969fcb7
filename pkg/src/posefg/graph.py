"""Sparse factor graph with Levenberg-Marquardt solving and fixed-lag windowing.

Variables live either on SE(3) (``"pose"``, 6 dof, right-perturbed) or in a
Euclidean vector space (``"vector"``, any dimension; twists are 6-vectors).
Factors are evaluated in batches: every factor class implements a
``evaluate(factors, values, jacobians)`` classmethod working on stacked
arrays, and the graph groups factors by class before linearizing.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Iterable, Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import lie
from .lie import Pose

log = logging.getLogger(__name__)

POSE = "pose"
VECTOR = "vector"

MIN_EIGENVALUE = 1e-12


class GraphError(Exception):
    pass


class UnknownVariableError(GraphError, KeyError):
    pass


class InvalidCovarianceError(GraphError, ValueError):
    pass


class RankDeficientError(GraphError):
    """The normal equations are singular; ``variables`` lists the culprits."""

    def __init__(self, message, variables=()):
        super().__init__(message)
        self.variables = list(variables)


class SingularInformationError(RankDeficientError):
    pass


def check_covariance(cov, dim=None) -> np.ndarray:
    cov = np.array(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InvalidCovarianceError(f"covariance must be square, got shape {cov.shape}")
    if dim is not None and cov.shape[0] != dim:
        raise InvalidCovarianceError(f"covariance must be {dim}x{dim}, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise InvalidCovarianceError("covariance has non-finite entries")
    scale = max(1.0, float(np.abs(cov).max()))
    if np.abs(cov - cov.T).max() > 1e-9 * scale:
        raise InvalidCovarianceError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    min_eig = np.linalg.eigvalsh(cov)[0]
    if min_eig <= MIN_EIGENVALUE:
        raise InvalidCovarianceError(f"covariance is not positive definite (min eigenvalue {min_eig:.3g})")
    return cov


def sqrt_information(cov) -> np.ndarray:
    """Whitening matrix ``W`` with ``W^T W = cov^-1``."""
    L = np.linalg.cholesky(cov)
    return np.linalg.solve(L, np.eye(cov.shape[0]))


@dataclass
class Variable:
    id: int
    kind: str
    value: object
    timestamp: float
    owner: str | None = None

    @property
    def dim(self) -> int:
        return 6 if self.kind == POSE else int(np.size(self.value))


class StackedValues(Mapping):
    """Read-only variable values with poses held in stacked arrays.

    Lets batched factor evaluation gather poses by fancy indexing instead of
    one Python object per variable.
    """

    def __init__(self, pose_ids, R, t, vectors):
        self.pose_ids = list(pose_ids)
        self.index = {v: i for i, v in enumerate(self.pose_ids)}
        self.R, self.t = R, t
        self.vectors = vectors

    @classmethod
    def from_dict(cls, values):
        pose_ids = [k for k, v in values.items() if isinstance(v, Pose)]
        R = np.array([values[k].R for k in pose_ids]).reshape(-1, 3, 3)
        t = np.array([values[k].t for k in pose_ids]).reshape(-1, 3)
        vectors = {k: np.asarray(v, dtype=float) for k, v in values.items() if not isinstance(v, Pose)}
        return cls(pose_ids, R, t, vectors)

    def __getitem__(self, k):
        i = self.index.get(k)
        if i is not None:
            return Pose(self.R[i], self.t[i])
        return self.vectors[k]

    def __iter__(self):
        yield from self.pose_ids
        yield from self.vectors

    def __len__(self):
        return len(self.pose_ids) + len(self.vectors)

    def poses(self, ids):
        idx = np.fromiter((self.index[k] for k in ids), dtype=np.intp, count=len(ids))
        return self.R[idx], self.t[idx]


def _stack_poses(values, ids):
    if isinstance(values, StackedValues):
        return values.poses(ids)
    Rs = np.empty((len(ids), 3, 3))
    ts = np.empty((len(ids), 3))
    for i, k in enumerate(ids):
        T = values[k]
        Rs[i] = T.R
        ts[i] = T.t
    return Rs, ts


def _stack_vectors(values, ids):
    if isinstance(values, StackedValues):
        return np.array([values.vectors[k] for k in ids], dtype=float)
    return np.array([values[k] for k in ids], dtype=float)


def _stack_attr_poses(factors, attr):
    cache = getattr(factors, "cache", None)
    if cache is not None and attr in cache:
        return cache[attr]
    out = np.array([getattr(f, attr).R for f in factors]), np.array([getattr(f, attr).t for f in factors])
    if cache is not None:
        cache[attr] = out
    return out


def _key_poses(values, factors, i):
    """Stacked poses of key ``i`` of every factor in a batch."""
    cache = getattr(factors, "cache", None)
    if cache is None or not isinstance(values, StackedValues):
        return _stack_poses(values, [f.keys[i] for f in factors])
    key = ("key", i, id(values.index))
    idx = cache.get(key)
    if idx is None:
        idx = cache[key] = np.array([values.index[f.keys[i]] for f in factors], dtype=np.intp)
    return values.R[idx], values.t[idx]


def _key_vectors(values, factors, i):
    return _stack_vectors(values, [f.keys[i] for f in factors])


class Factor:
    """Base class for all factors.

    Subclasses set ``kind``, ``key_kinds`` and ``dim`` and implement the
    batched ``evaluate``. Residuals are unwhitened; the graph applies
    ``sqrt_info``.
    """

    kind: ClassVar[str] = "factor"
    key_kinds: ClassVar[tuple] = ()
    dim: ClassVar[int] = 6
    registry: ClassVar[dict] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "kind" in cls.__dict__:
            Factor.registry[cls.kind] = cls

    def __init__(self, keys, covariance=None, sqrt_info=None):
        self.keys = tuple(int(k) for k in keys)
        if len(self.keys) != len(self.key_kinds):
            raise GraphError(f"{self.kind} expects {len(self.key_kinds)} keys, got {len(self.keys)}")
        if covariance is not None:
            self.covariance = check_covariance(covariance, self.residual_dim)
            self.sqrt_info = sqrt_information(self.covariance)
        elif sqrt_info is not None:
            self.covariance = None
            self.sqrt_info = np.array(sqrt_info, dtype=float)
        else:
            raise GraphError("factor needs a covariance or a square-root information matrix")

    @property
    def residual_dim(self) -> int:
        return self.dim

    def group_key(self):
        return (type(self), self.residual_dim)

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        raise NotImplementedError

    def residual(self, values) -> np.ndarray:
        return type(self).evaluate([self], values)[0][0]

    def jacobians(self, values) -> list:
        _, J = type(self).evaluate([self], values, jacobians=True)
        return [j[0] for j in J]

    def error(self, values) -> float:
        r = self.sqrt_info @ self.residual(values)
        return float(r @ r)

    # JSON hooks
    def params(self) -> dict:
        return {}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys, covariance=covariance, sqrt_info=sqrt_info, **params)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "keys": list(self.keys), "params": self.params()}
        if self.covariance is not None:
            d["covariance"] = self.covariance.tolist()
        else:
            d["sqrt_info"] = self.sqrt_info.tolist()
        return d


def _pose_param(p):
    return p if isinstance(p, Pose) else Pose.from_dict(p)


class PriorFactor(Factor):
    """``Log(T^-1 M)`` for a single pose and a fixed mean ``M``."""

    kind = "pose_prior"
    key_kinds = (POSE,)

    def __init__(self, key, mean: Pose, covariance=None, sqrt_info=None):
        super().__init__([key] if np.isscalar(key) else key, covariance, sqrt_info)
        self.mean = _pose_param(mean)

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        R, t = _key_poses(values, factors, 0)
        Rm, tm = _stack_attr_poses(factors, "mean")
        Rx, tx = lie.se3_between(R, t, Rm, tm)
        r = lie.se3_log(Rx, tx)
        if not jacobians:
            return r, None
        Jinv = lie.se3_right_jacobian_inv(r)
        Ri, ti = lie.se3_inverse(Rx, tx)
        return r, [-Jinv @ lie.se3_adjoint(Ri, ti)]

    def params(self):
        return {"mean": self.mean.to_dict()}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys[0], Pose.from_dict(params["mean"]), covariance, sqrt_info)


class VectorPriorFactor(Factor):
    """``mean - x`` for a vector variable."""

    kind = "vector_prior"
    key_kinds = (VECTOR,)

    def __init__(self, key, mean, covariance=None, sqrt_info=None):
        self.mean = np.array(mean, dtype=float).reshape(-1)
        super().__init__([key] if np.isscalar(key) else key, covariance, sqrt_info)

    @property
    def residual_dim(self):
        return self.mean.size

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        x = _key_vectors(values, factors, 0)
        r = np.array([f.mean for f in factors]) - x
        if not jacobians:
            return r, None
        n, d = r.shape
        return r, [np.broadcast_to(-np.eye(d), (n, d, d))]

    def params(self):
        return {"mean": self.mean.tolist()}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys[0], params["mean"], covariance, sqrt_info)


class BetweenFactor(Factor):
    """Relative-pose factor ``Log(Z^-1 A^-1 B)``; zero when ``A^-1 B == Z``."""

    kind = "pose_between"
    key_kinds = (POSE, POSE)

    def __init__(self, keys, measured: Pose = None, covariance=None, sqrt_info=None):
        super().__init__(keys, covariance, sqrt_info)
        self.measured = Pose.identity() if measured is None else _pose_param(measured)

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        Ra, ta = _key_poses(values, factors, 0)
        Rb, tb = _key_poses(values, factors, 1)
        Rz, tz = _stack_attr_poses(factors, "measured")
        Ry, ty = lie.se3_between(Ra, ta, Rb, tb)
        Rx, tx = lie.se3_between(Rz, tz, Ry, ty)
        r = lie.se3_log(Rx, tx)
        if not jacobians:
            return r, None
        Jinv = lie.se3_right_jacobian_inv(r)
        Ryi, tyi = lie.se3_inverse(Ry, ty)
        return r, [-Jinv @ lie.se3_adjoint(Ryi, tyi), Jinv]

    def params(self):
        return {"measured": self.measured.to_dict()}

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        return cls(keys, Pose.from_dict(params["measured"]), covariance, sqrt_info)


class LinearPriorFactor(Factor):
    """Gaussian prior left behind by marginalization.

    Residual ``W * delta(x) + r0`` where ``delta`` stacks the local
    coordinates of every key relative to the linearization point.
    """

    kind = "linear_prior"

    def __init__(self, keys, kinds, lin_values, sqrt_info, r0):
        self.keys = tuple(int(k) for k in keys)
        self.kinds = tuple(kinds)
        self.lin_values = list(lin_values)
        self.sqrt_info = np.array(sqrt_info, dtype=float)
        self.r0 = np.array(r0, dtype=float)
        self.covariance = None
        self.dims = [6 if k == POSE else int(np.size(v)) for k, v in zip(self.kinds, self.lin_values)]

    @property
    def residual_dim(self):
        return self.sqrt_info.shape[0]

    def group_key(self):
        return (type(self), id(self))

    @classmethod
    def evaluate(cls, factors, values, jacobians=False):
        (f,) = factors  # never batched
        poses = [i for i, k in enumerate(f.kinds) if k == POSE]
        parts: list = [None] * len(f.keys)
        jacs: list = [None] * len(f.keys)
        if poses:
            lin = [f.lin_values[i] for i in poses]
            cur = [values[f.keys[i]] for i in poses]
            d = lie.se3_log(
                *lie.se3_between(
                    np.array([T.R for T in lin]), np.array([T.t for T in lin]),
                    np.array([T.R for T in cur]), np.array([T.t for T in cur]),
                )
            )  # fmt: skip
            Jr = lie.se3_right_jacobian_inv(d) if jacobians else None
            for j, i in enumerate(poses):
                parts[i] = d[j]
                if jacobians:
                    jacs[i] = Jr[j]
        for i, (key, kind, lin) in enumerate(zip(f.keys, f.kinds, f.lin_values)):
            if kind != POSE:
                x = np.asarray(values[key], dtype=float)
                parts[i] = x - lin
                jacs[i] = np.eye(x.size)
        delta = np.concatenate(parts)
        # The residual is already whitened by construction; sqrt_info is
        # applied by the graph, so fold W^-1 r0 into the unwhitened residual.
        r = delta + f._rhs
        if not jacobians:
            return r[None], None
        out, off = [], 0
        for j, d in zip(jacs, f.dims):
            J = np.zeros((delta.size, d))
            J[off : off + d] = j
            out.append(J[None])
            off += d
        return r[None], out

    @property
    def _rhs(self):
        # W delta + r0 == W (delta + W^+ r0); W has full row rank.
        if not hasattr(self, "_rhs_cache"):
            self._rhs_cache = np.linalg.lstsq(self.sqrt_info, self.r0, rcond=None)[0]
        return self._rhs_cache

    def to_dict(self):
        return {
            "kind": self.kind,
            "keys": list(self.keys),
            "params": {
                "kinds": list(self.kinds),
                "lin_values": [v.to_dict() if k == POSE else np.asarray(v).tolist() for k, v in zip(self.kinds, self.lin_values)],
                "r0": self.r0.tolist(),
            },
            "sqrt_info": self.sqrt_info.tolist(),
        }

    @classmethod
    def from_params(cls, keys, params, covariance=None, sqrt_info=None):
        lin = [Pose.from_dict(v) if k == POSE else np.array(v) for k, v in zip(params["kinds"], params["lin_values"])]
        return cls(keys, params["kinds"], lin, sqrt_info, params["r0"])


@dataclass
class SolverConfig:
    """Levenberg-Marquardt settings; damping adds ``lambda * I`` to the normal equations."""

    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iterations: int = 50
    relative_tolerance: float = 1e-8
    absolute_tolerance: float = 1e-20
    max_damping: float = 1e10
    # Factor the undamped system at the solution: exposes gauge freedoms and primes marginals.
    check_rank: bool = True


@dataclass
class SolveReport:
    iterations: int
    initial_chi2: float
    final_chi2: float
    converged: bool
    damping_trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "initial_chi2": self.initial_chi2,
            "final_chi2": self.final_chi2,
            "converged": self.converged,
            "damping_trace": list(self.damping_trace),
        }


class _Batch(list):
    """Factor list of one group; ``cache`` holds stacked constant parameters."""

    def __init__(self, factors):
        super().__init__(factors)
        self.cache = {}


class _Group:
    """Factors of one class and residual dimension, with scatter indices."""

    def __init__(self, cls, factors, offsets, dims):
        self.cls = cls
        self.factors = _Batch(factors)
        self.W = np.array([f.sqrt_info for f in factors])
        blocks = []
        for i in range(len(factors[0].keys)):
            start = np.array([offsets[f.keys[i]] for f in factors])
            blocks.append(start[:, None] + np.arange(dims[factors[0].keys[i]]))
        self.idx = np.concatenate(blocks, axis=1)  # (N, D) columns touched by each factor

    def whitened(self, values, jacobians):
        r, J = self.cls.evaluate(self.factors, values, jacobians)
        rw = (self.W @ r[..., None])[..., 0]
        if J is None:
            return rw, None
        return rw, self.W @ np.concatenate(J, axis=2)


class _Problem:
    """Fixed structure of one linearization: ordering, groups, CSC pattern."""

    def __init__(self, graph: FactorGraph):
        variables = sorted(graph.variables.values(), key=lambda v: (v.timestamp, v.owner or "", v.id))
        self.order = [v.id for v in variables]
        self.dims = {v.id: v.dim for v in variables}
        self.offsets = {}
        n = 0
        for v in variables:
            self.offsets[v.id] = n
            n += v.dim
        self.n = n
        self.pose_ids = [v.id for v in variables if v.kind == POSE]
        self.pose_set = set(self.pose_ids)
        self.pose_dx = np.array([self.offsets[v] for v in self.pose_ids], dtype=np.intp).reshape(-1, 1) + np.arange(6)

        buckets: dict = {}
        for f in graph.factors.values():
            buckets.setdefault(f.group_key(), []).append(f)
        self.groups = [_Group(key[0], fs, self.offsets, self.dims) for key, fs in buckets.items()]

        # Linearization yields one value per (factor, row, col) entry; the
        # band layout sums them directly and the CSC form is built on demand.
        rows, cols = [], []
        for g in self.groups:
            N, D = g.idx.shape
            rows.append(np.broadcast_to(g.idx[:, :, None], (N, D, D)).ravel())
            cols.append(np.broadcast_to(g.idx[:, None, :], (N, D, D)).ravel())
        self.rows = np.concatenate(rows) if rows else np.zeros(0, np.intp)
        self.cols = np.concatenate(cols) if cols else np.zeros(0, np.intp)
        offset = self.rows - self.cols
        self.bandwidth = int(offset.max()) if offset.size else 0
        self.band_flops = float(n) * (self.bandwidth + 1) ** 2
        self.lower = np.flatnonzero(offset >= 0)
        self.band_flat = offset[self.lower] * n + self.cols[self.lower]

    def linearize(self, values):
        data, grad, chi2 = [], np.zeros(self.n), 0.0
        for g in self.groups:
            rw, J = g.whitened(values, True)
            chi2 += float(np.sum(rw * rw))
            Jt = J.transpose(0, 2, 1)
            data.append((Jt @ J).ravel())
            grad += np.bincount(g.idx.ravel(), weights=(Jt @ rw[..., None]).ravel(), minlength=self.n)
        vals = np.concatenate(data) if data else np.zeros(0)
        return vals, grad, chi2

    def chi2(self, values):
        total = 0.0
        for g in self.groups:
            rw, _ = g.whitened(values, False)
            total += float(np.sum(rw * rw))
        return total

    def matrix(self, vals):
        return sp.csc_matrix((vals, (self.rows, self.cols)), shape=(self.n, self.n))

    def band(self, vals):
        """Lower band storage of ``H`` in LAPACK layout."""
        size = (self.bandwidth + 1) * self.n
        return np.bincount(self.band_flat, weights=vals[self.lower], minlength=size).reshape(self.bandwidth + 1, self.n)

    def variable_of(self, index):
        for vid in self.order:
            o = self.offsets[vid]
            if o <= index < o + self.dims[vid]:
                return vid
        return None


# Above this many band flops the general sparse LU is used instead.
BANDED_FLOP_LIMIT = 1e9


class _BandedCholesky:
    """Cholesky of a time-ordered information matrix in LAPACK band storage.

    Variables are ordered by timestamp, so the newest states form the
    trailing block and their joint covariance is ``(L22 L22^T)^-1``.
    """

    def __init__(self, problem, vals, damping=0.0):
        ab = problem.band(vals)
        if damping:
            ab[0] += damping
        self.n = problem.n
        self.scale = float(ab[0].max()) if problem.n else 1.0
        try:
            self.c = sla.cholesky_banded(ab, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise _NotPositiveDefinite(_leading_minor(exc)) from None

    def solve(self, rhs):
        return sla.cho_solve_banded((self.c, True), rhs, check_finite=False)

    def tiny_pivots(self, rel):
        return np.flatnonzero(self.c[0] ** 2 <= rel * max(self.scale, 1.0))

    def inverse_block(self, idx):
        m = int(min(idx))
        k = self.n - m
        if k > 600:
            return _solve_columns(self, self.n, idx)
        b = self.c.shape[0] - 1
        L = np.zeros((k, k))
        for d in range(min(b, k - 1) + 1):
            j = np.arange(k - d)
            L[j + d, j] = self.c[d, m + j]
        Linv = sla.solve_triangular(L, np.eye(k), lower=True, check_finite=False)
        sub = np.asarray(idx) - m
        Li = Linv[:, sub]
        return Li.T @ Li


class _SparseLU:
    def __init__(self, problem, vals, damping=0.0):
        self.n = problem.n
        H = problem.matrix(vals)
        if damping:
            H = (H + damping * sp.identity(problem.n, format="csc")).tocsc()
        self.scale = float(H.diagonal().max()) if problem.n else 1.0
        try:
            self.lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError:
            raise _NotPositiveDefinite(None) from None

    def solve(self, rhs):
        return self.lu.solve(rhs)

    def tiny_pivots(self, rel):
        pivots = np.abs(self.lu.U.diagonal())
        tiny = np.flatnonzero(pivots <= rel * max(float(pivots.max()), 1.0))
        return self.lu.perm_c[tiny] if self.lu.perm_c is not None else tiny

    def inverse_block(self, idx):
        return _solve_columns(self, self.n, idx)


class _NotPositiveDefinite(Exception):
    def __init__(self, index):
        super().__init__(index)
        self.index = index


def _leading_minor(exc):
    digits = "".join(ch if ch.isdigit() else " " for ch in str(exc)).split()
    return int(digits[0]) - 1 if digits else None


def _solve_columns(factor, n, idx):
    E = np.zeros((n, len(idx)))
    E[idx, np.arange(len(idx))] = 1.0
    return factor.solve(E)[idx]


def _factorize(problem, vals, damping=0.0):
    if problem.band_flops <= BANDED_FLOP_LIMIT:
        return _BandedCholesky(problem, vals, damping)
    return _SparseLU(problem, vals, damping)


class FactorGraph:
    def __init__(self):
        self.variables: dict[int, Variable] = {}
        self.factors: dict[int, Factor] = {}
        self._adjacency: dict[int, set] = {}
        self._next_var = itertools.count()
        self._next_factor = itertools.count()
        self._marginal_cache = None
        self._problem_cache = None

    # -- construction -----------------------------------------------------------

    def add_variable(self, kind, initial_value, timestamp=0.0, owner=None) -> int:
        if kind not in (POSE, VECTOR):
            raise GraphError(f"unknown variable kind {kind!r}")
        if not np.isfinite(timestamp):
            raise GraphError("timestamp must be finite")
        if kind == POSE and not isinstance(initial_value, Pose):
            raise GraphError("pose variables need a Pose value")
        if kind == VECTOR:
            initial_value = np.array(initial_value, dtype=float).reshape(-1)
        vid = next(self._next_var)
        self.variables[vid] = Variable(vid, kind, initial_value, float(timestamp), owner)
        self._adjacency[vid] = set()
        self._invalidate()
        return vid

    def add_factor(self, factor: Factor) -> int:
        for k, kind in zip(factor.keys, getattr(factor, "kinds", factor.key_kinds)):
            if k not in self.variables:
                raise UnknownVariableError(f"unknown variable id {k}")
            if self.variables[k].kind != kind:
                raise GraphError(f"{factor.kind} expects a {kind} variable at key {k}")
        fid = next(self._next_factor)
        self.factors[fid] = factor
        for k in factor.keys:
            self._adjacency[k].add(fid)
        self._invalidate()
        return fid

    def remove_factor(self, fid):
        f = self.factors.pop(fid)
        for k in f.keys:
            self._adjacency[k].discard(fid)
        self._invalidate()

    def remove_variables(self, ids):
        """Delete variables and every factor touching them."""
        ids = set(ids)
        for fid in sorted({fid for v in ids for fid in self._adjacency[v]}):
            self.remove_factor(fid)
        for v in ids:
            del self.variables[v]
            del self._adjacency[v]
        self._invalidate()

    def value(self, vid):
        try:
            return self.variables[vid].value
        except KeyError:
            raise UnknownVariableError(f"unknown variable id {vid}") from None

    def set_value(self, vid, value):
        self.variables[vid].value = value
        self._invalidate(structure=False)

    def factors_of(self, vid) -> list:
        return sorted(self._adjacency[vid])

    def values(self) -> dict:
        return {vid: v.value for vid, v in self.variables.items()}

    def chi2(self) -> float:
        if not self.factors:
            return 0.0
        problem = self._problem()
        return problem.chi2(self._stacked_values(problem))

    def _invalidate(self, structure=True):
        self._marginal_cache = None
        if structure:
            self._problem_cache = None

    # -- solving ----------------------------------------------------------------

    def _retract(self, problem, values: StackedValues, dx):
        dR, dt = lie.se3_exp(dx[problem.pose_dx])
        R, t = lie.se3_compose(values.R, values.t, dR, dt)
        vectors = {v: x + dx[problem.offsets[v] : problem.offsets[v] + x.size] for v, x in values.vectors.items()}
        out = StackedValues.__new__(StackedValues)
        out.pose_ids, out.index, out.R, out.t, out.vectors = values.pose_ids, values.index, R, t, vectors
        return out

    def _stacked_values(self, problem) -> StackedValues:
        pose_ids = problem.pose_ids
        R = np.array([self.variables[v].value.R for v in pose_ids]).reshape(-1, 3, 3)
        t = np.array([self.variables[v].value.t for v in pose_ids]).reshape(-1, 3)
        vectors = {v: np.array(self.variables[v].value, dtype=float) for v in problem.order if v not in problem.pose_set}
        return StackedValues(pose_ids, R, t, vectors)

    def _problem(self) -> _Problem:
        if self._problem_cache is None:
            self._problem_cache = _Problem(self)
        return self._problem_cache

    def _check_constrained(self):
        if not self.factors:
            raise RankDeficientError("graph has no factors", list(self.variables))
        loose = [v for v, fs in self._adjacency.items() if not fs]
        if loose:
            raise RankDeficientError(f"unconstrained variables: {loose}", loose)

    def solve(self, config: SolverConfig | None = None) -> SolveReport:
        config = config or SolverConfig()
        self._check_constrained()
        problem = self._problem()
        values = self._stacked_values(problem)
        vals, grad, chi2 = problem.linearize(values)
        report = SolveReport(0, chi2, chi2, False)
        lam = config.initial_damping
        for it in range(config.max_iterations):
            report.iterations = it + 1
            if chi2 <= config.absolute_tolerance:
                report.converged = True
                break
            try:
                dx = -_factorize(problem, vals, lam).solve(grad)
                ok = np.all(np.isfinite(dx))
            except _NotPositiveDefinite:
                ok = False
            if not ok:
                if it == 0 and lam == config.initial_damping:
                    self._raise_rank_deficient(problem, vals)
                lam *= config.damping_up
                report.damping_trace.append(lam)
                if lam > config.max_damping:
                    break
                continue
            candidate = self._retract(problem, values, dx)
            new_chi2 = problem.chi2(candidate)
            report.damping_trace.append(lam)
            if new_chi2 < chi2:
                rel = (chi2 - new_chi2) / chi2
                values = candidate
                chi2 = new_chi2
                lam = max(lam / config.damping_down, 1e-12)
                if rel < config.relative_tolerance:
                    report.converged = True
                    break
                vals, grad, chi2 = problem.linearize(values)
            else:
                # Rejections at round-off level mean there is nothing left to gain.
                predicted = -float(grad @ dx) * 2.0
                if predicted <= config.relative_tolerance * chi2 or new_chi2 <= chi2 * (1.0 + 1e-12):
                    report.converged = True
                    break
                lam *= config.damping_up
                if lam > config.max_damping:
                    break
        for i, vid in enumerate(values.pose_ids):
            self.variables[vid].value = Pose(values.R[i], values.t[i])
        for vid, x in values.vectors.items():
            self.variables[vid].value = x
        report.final_chi2 = chi2
        self._invalidate(structure=False)
        if not report.converged:
            log.warning("solver did not converge after %d iterations (chi2 %.6g)", report.iterations, chi2)
        if config.check_rank:
            # Damping hides gauge freedoms; the undamped factorization at the
            # solution exposes them and is kept for marginal recovery.
            try:
                self._information_factor()
            except SingularInformationError as exc:
                raise RankDeficientError(f"singular normal equations; unconstrained variables: {exc.variables}", exc.variables) from None
        return report

    def _raise_rank_deficient(self, problem, vals, index=None):
        H = problem.matrix(vals)
        diag = H.diagonal()
        bad = {problem.variable_of(i) for i in np.flatnonzero(diag <= MIN_EIGENVALUE)}
        if index is not None:
            bad.add(problem.variable_of(index))
        raise RankDeficientError(f"singular normal equations; unconstrained variables: {sorted(bad)}", sorted(bad))

    # -- covariance recovery ----------------------------------------------------

    def _information_factor(self):
        if self._marginal_cache is None:
            self._check_constrained()
            problem = self._problem()
            vals, _, _ = problem.linearize(self._stacked_values(problem))
            try:
                lu = _factorize(problem, vals)
            except _NotPositiveDefinite as exc:
                bad = [] if exc.index is None else [problem.variable_of(exc.index)]
                raise SingularInformationError(f"information matrix is singular near variables {bad}", bad) from None
            tiny = lu.tiny_pivots(1e-14)
            if tiny.size:
                bad = sorted({problem.variable_of(int(c)) for c in tiny})
                raise SingularInformationError(f"information matrix is singular at variables {bad}", bad)
            self._marginal_cache = (problem, lu)
        return self._marginal_cache

    def joint_marginals(self, blocks: Iterable[Iterable[int]]) -> list:
        """Joint marginal covariance for each list of variable ids."""
        blocks = [list(b) for b in blocks]
        problem, lu = self._information_factor()
        idx = []
        for b in blocks:
            for v in b:
                if v not in problem.offsets:
                    raise UnknownVariableError(f"unknown variable id {v}")
                idx.extend(range(problem.offsets[v], problem.offsets[v] + problem.dims[v]))
        if not idx:
            return [np.zeros((0, 0)) for _ in blocks]
        X = lu.inverse_block(np.array(idx))
        out, start = [], 0
        for b in blocks:
            d = sum(problem.dims[v] for v in b)
            C = X[start : start + d, start : start + d]
            out.append(0.5 * (C + C.T))
            start += d
        return out

    def marginal_covariance(self, vid) -> np.ndarray:
        return self.joint_marginals([[vid]])[0]

    # -- fixed-lag window -------------------------------------------------------

    def expired(self, horizon, now) -> list:
        """Variables older than ``horizon`` seconds before ``now``.

        A variable at exactly ``now - horizon`` is dropped, so a 1 s horizon at
        30 Hz keeps 30 frames; the newest timestamp is never dropped.
        """
        return sorted(
            vid
            for vid, v in self.variables.items()
            if v.timestamp < now and now - v.timestamp >= horizon - 1e-9
        )

    def apply_window(self, horizon, now, mode="prior") -> list:
        if mode not in ("prior", "delete"):
            raise GraphError(f"unknown window mode {mode!r}")
        old = self.expired(horizon, now)
        if not old:
            return []
        if mode == "delete":
            self.remove_variables(old)
        else:
            self.marginalize(old)
        return old

    def marginalize(self, ids) -> int | None:
        """Remove ``ids`` and summarize their factors as a prior on the neighbours.

        Uses the Schur complement of the linearized system at the current
        estimate. Returns the id of the new prior factor, if one was needed.
        """
        ids = sorted(set(ids))
        if not ids:
            return None
        removed = set(ids)
        fids = sorted({fid for v in ids for fid in self._adjacency[v]})
        keep = sorted({k for fid in fids for k in self.factors[fid].keys} - removed, key=lambda v: (self.variables[v].timestamp, v))
        if not keep:
            self.remove_variables(ids)
            return None

        local = FactorGraph()
        local_ids = {}
        for v in ids + keep:
            var = self.variables[v]
            local.variables[v] = Variable(v, var.kind, var.value, var.timestamp, var.owner)
            local._adjacency[v] = set()
        for fid in fids:
            local.factors[fid] = self.factors[fid]
            for k in self.factors[fid].keys:
                local._adjacency[k].add(fid)
        problem = _Problem(local)
        vals, grad, _ = problem.linearize(local.values())
        H = problem.matrix(vals).toarray()

        def index(vs):
            return np.concatenate([np.arange(problem.offsets[v], problem.offsets[v] + problem.dims[v]) for v in vs])

        im, ik = index(ids), index(keep)
        Hmm = H[np.ix_(im, im)]
        Hmk = H[np.ix_(im, ik)]
        w, U = np.linalg.eigh(Hmm)
        good = w > 1e-12 * max(w.max(), 1.0)
        Hmm_inv = (U[:, good] / w[good]) @ U[:, good].T
        Hs = H[np.ix_(ik, ik)] - Hmk.T @ Hmm_inv @ Hmk
        gs = grad[ik] - Hmk.T @ Hmm_inv @ grad[im]
        Hs = 0.5 * (Hs + Hs.T)

        self.remove_variables(ids)
        for fid in fids:
            if fid in self.factors:
                self.remove_factor(fid)

        w, U = np.linalg.eigh(Hs)
        good = w > 1e-12 * max(w.max(), 1.0)
        if not np.any(good):
            return None
        s = np.sqrt(w[good])
        W = (U[:, good] * s).T
        r0 = (U[:, good].T @ gs) / s
        kinds = [self.variables[v].kind for v in keep]
        lin = [self.variables[v].value for v in keep]
        return self.add_factor(LinearPriorFactor(keep, kinds, lin, W, r0))

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "variables": [
                {
                    "id": v.id,
                    "kind": v.kind,
                    "timestamp": v.timestamp,
                    "owner": v.owner,
                    "value": v.value.to_dict() if v.kind == POSE else np.asarray(v.value).tolist(),
                }
                for v in sorted(self.variables.values(), key=lambda v: v.id)
            ],
            "factors": [dict(id=fid, **f.to_dict()) for fid, f in sorted(self.factors.items())],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d) -> FactorGraph:
        g = cls()
        max_v, max_f = -1, -1
        for item in d["variables"]:
            value = Pose.from_dict(item["value"]) if item["kind"] == POSE else np.array(item["value"], dtype=float)
            g.variables[item["id"]] = Variable(item["id"], item["kind"], value, item["timestamp"], item.get("owner"))
            g._adjacency[item["id"]] = set()
            max_v = max(max_v, item["id"])
        for item in d["factors"]:
            fcls = Factor.registry[item["kind"]]
            f = fcls.from_params(item["keys"], item.get("params", {}), item.get("covariance"), item.get("sqrt_info"))
            g.factors[item["id"]] = f
            for k in f.keys:
                g._adjacency[k].add(item["id"])
            max_f = max(max_f, item["id"])
        g._next_var = itertools.count(max_v + 1)
        g._next_factor = itertools.count(max_f + 1)
        return g

    @classmethod
    def loads(cls, s: str) -> FactorGraph:
        return cls.from_dict(json.loads(s))

