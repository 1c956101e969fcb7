import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefg import lie
from posefg.evaluation import (
    BehindCameraError,
    EvaluationError,
    Intrinsics,
    ObjectModel,
    mspd,
    mssd,
    pareto_front,
    precision_recall,
)
from posefg.lie import Pose
from posefg.sim import FLIP_Z

CUBE = np.array([[x, y, z] for x in (-0.05, 0.05) for y in (-0.05, 0.05) for z in (-0.05, 0.05)])


def model(label="a", symmetries=()):
    return ObjectModel(label, CUBE, list(symmetries))


def at(x=0.0, y=0.0, z=1.0):
    return Pose(np.eye(3), [x, y, z])


def test_mssd_examples():
    rng = np.random.default_rng(0)
    T = lie.random_pose(rng)
    m = model()
    assert mssd(T, T, m) == 0.0
    sym = model(symmetries=[FLIP_Z])
    assert mssd(T @ FLIP_Z, T, sym) < 1e-12
    assert mssd(T @ FLIP_Z, T, m) > 0.05
    d = np.array([0.03, -0.04, 0.0])
    assert np.isclose(mssd(Pose(T.R, T.t + d), T, m), 0.05)


def test_model_diameter_and_identity():
    m = model()
    assert np.isclose(m.diameter, 0.1 * np.sqrt(3))
    assert m.symmetries[0].allclose(Pose.identity())


def test_mspd_examples():
    K = Intrinsics()
    m = model()
    assert mspd(at(), at(), m, K) == 0.0
    for Z, d in [(1.0, 0.01), (2.0, 0.02), (0.5, 0.005)]:
        err = mspd(at(d, 0, Z), at(0, 0, Z), m, K)
        # the largest image shift comes from the model points nearest the camera
        assert np.isclose(err, K.fx * d / (Z - 0.05), rtol=1e-9)
    e1 = mspd(at(0.01, 0.01, 1.0), at(), m, Intrinsics(cx=0, cy=0))
    e2 = mspd(at(0.01, 0.01, 1.0), at(), m, Intrinsics(fx=1200.0, fy=1200.0, cx=0, cy=0))
    assert np.isclose(e2, 2 * e1)
    with pytest.raises(BehindCameraError):
        mspd(at(0, 0, -1.0), at(), m, K)


def test_mspd_in_reference_frame():
    rng = np.random.default_rng(1)
    cam = lie.random_pose(rng)
    est, gt = at(0.01, 0, 1.0), at()
    m = model()
    assert np.isclose(mspd(cam @ est, cam @ gt, m, Intrinsics(), camera=cam), mspd(est, gt, m, Intrinsics()))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetry_invariance(seed):
    rng = np.random.default_rng(seed)
    m = model(symmetries=[FLIP_Z])
    E, T = lie.random_pose(rng), lie.random_pose(rng)
    assert np.isclose(mssd(E, T @ FLIP_Z, m), mssd(E, T, m))
    assert np.isclose(mssd(E @ FLIP_Z, T, m), mssd(E, T, m))


def frame(objs):
    return {"timestamp": 0.0, "camera": Pose.identity(), "objects": [{"label": l, "pose": p, "visible": v} for l, p, v in objs]}


def test_perfect_predictions():
    truth = [frame([("a", at(), True), ("b", at(0.2), True)])] * 3
    preds = [[{"label": "a", "pose": at()}, {"label": "b", "pose": at(0.2)}]] * 3
    rep = precision_recall(preds, truth, [model("a"), model("b")])
    assert rep.recall == 1.0 and rep.precision == 1.0


def test_no_predictions():
    truth = [frame([("a", at(), True)])] * 2
    rep = precision_recall([[], []], truth, [model("a")])
    assert rep.recall == 0.0 and rep.precision == 1.0 and rep.n_emitted == 0


def test_hand_built_fixture():
    truth = [frame([("a", at(), True)]), frame([("a", at(), True)]), frame([("a", at(), True)])]
    preds = [
        [{"label": "a", "pose": at()}],
        [],  # miss
        [{"label": "a", "pose": at()}, {"label": "a", "pose": at(0.5)}],  # hit and outlier
    ]
    rep = precision_recall(preds, truth, [model("a")])
    assert np.isclose(rep.recall, 2 / 3) and np.isclose(rep.precision, 2 / 3)
    assert all(np.isclose(r, 2 / 3) and np.isclose(p, 2 / 3) for _, _, r, p in rep.curve)


def test_predictions_of_invisible_objects_are_ignored():
    truth = [frame([("a", at(), False), ("b", at(0.2), True)])]
    preds = [[{"label": "a", "pose": at()}, {"label": "b", "pose": at(0.2)}]]
    rep = precision_recall(preds, truth, [model("a"), model("b")])
    assert rep.n_visible == 1 and rep.n_emitted == 1 and rep.precision == 1.0


def test_thresholds_grade_errors():
    truth = [frame([("a", at(), True)])]
    m = model("a")
    # 1 cm offset at 1 m: mssd 0.01 m (0.058 diameters), mspd about 6 px
    rep = precision_recall([[{"label": "a", "pose": at(0.01)}]], truth, [m])
    mssd_rows = [(t, r) for name, t, r, _ in rep.curve if name == "mssd"]
    assert [r for t, r in mssd_rows] == [0.0] + [1.0] * 9
    assert 0 < rep.recall_mspd < 1


def test_errors():
    with pytest.raises(EvaluationError):
        precision_recall([], [], [model()])
    with pytest.raises(EvaluationError):
        precision_recall([[]], [frame([]), frame([])], [model()])


def test_pareto_front():
    pts = [(0.1, 0.9), (0.2, 0.8), (0.15, 0.7), (0.3, 0.85), (0.3, 0.5), (0.05, 0.95)]
    front = pareto_front(pts)
    assert front == [5, 0, 3]
    rec = [pts[i][0] for i in front]
    prec = [pts[i][1] for i in front]
    assert rec == sorted(rec) and prec == sorted(prec, reverse=True)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
def test_pareto_front_property(pts):
    front = pareto_front(pts)
    for a, b in zip(front, front[1:]):
        assert pts[a][0] < pts[b][0] and pts[a][1] > pts[b][1]
    for i in range(len(pts)):
        assert not any(p[0] >= pts[i][0] and p[1] >= pts[i][1] and p != pts[i] for p in pts) or i not in front
