import copy
import math

import numpy as np
import pytest

from posefg import lie, sim
from posefg.factors import (
    CameraFactor,
    ConstantPoseFactor,
    CovModelParams,
    IntegrationFactor,
    MotionNoise,
    ObjectFactor,
    SigmaModel,
    constant_pose_cov,
    measurement_covariance,
)
from posefg.graph import LinearPriorFactor, VectorPriorFactor
from posefg.lie import Pose
from posefg.tracker import (
    CONST_POSE,
    CONST_VEL,
    Detection,
    Frame,
    GateConfig,
    OutOfOrderFrameError,
    Snapshot,
    Tracker,
    TrackerConfig,
    TrackState,
    ellipsoid_volume,
    extrapolate,
    select_predictions,
)

CAM = sim.look_at((0.0, -0.8, 0.4))


def det_at(world_pose, label="a", n_px=3000, camera=CAM):
    return Detection(label, camera.inverse() @ world_pose, n_px)


def obj(x=0.0, y=0.0, z=0.0, yaw=0.0):
    return Pose(lie.exp_so3([0, 0, yaw]), [x, y, z])


def count(graph, cls):
    return sum(type(f) is cls for f in graph.factors.values())


def noiseless(scene):
    tiny = SigmaModel(1e-15, 0.0)
    scene.corruption = sim.CorruptionConfig(
        dropout=0.0, outlier=0.0, noise=CovModelParams(tiny, tiny, tiny), camera_sigma_t=1e-15, camera_sigma_r=1e-15
    )
    return scene


def test_first_frame_creates_one_track():
    tr = Tracker()
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    g = tr.graph
    assert len(tr.tracks) == 1
    assert count(g, CameraFactor) == 1 and count(g, ObjectFactor) == 1
    assert count(g, ConstantPoseFactor) == 0 and count(g, IntegrationFactor) == 0
    assert len(g.variables) == 2


def test_empty_frame_extends_with_motion_factor_only():
    tr = Tracker()
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    tr.ingest(Frame(1 / 30, CAM, []))
    g = tr.graph
    assert count(g, ObjectFactor) == 1 and count(g, ConstantPoseFactor) == 1
    (track,) = tr.active_tracks()
    assert len(track.poses) == 2
    # the motion factor has zero mean: the estimate does not move
    assert g.value(track.poses[1][1]).allclose(g.value(track.poses[0][1]), atol=1e-9)


@pytest.mark.parametrize("motion", [CONST_POSE, CONST_VEL])
def test_noiseless_static_scene_is_exact(motion):
    scene = noiseless(sim.make_static_scene(3, seed=1, duration=10.0))
    truth, frames = sim.generate(scene)
    tr = Tracker(TrackerConfig(motion_model=motion))
    for f in frames:
        tr.ingest(f)
    assert len(frames) == 300 and len(tr.tracks) == 3
    gt = {o.label: o.pose for o in truth[-1].objects}
    for t in tr.active_tracks():
        est = tr.graph.value(t.latest_pose)
        assert lie.translation_distance(est, gt[t.label]) < 1e-6
        assert lie.rotation_angle(est.R.T @ gt[t.label].R) < 1e-6


def test_out_of_order_and_repeated_frames_rejected():
    tr = Tracker()
    tr.ingest(Frame(1.0, CAM, []))
    for t in (0.5, 1.0):
        with pytest.raises(OutOfOrderFrameError):
            tr.ingest(Frame(t, CAM, []))


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection("a", Pose.identity(), 0)
    with pytest.raises(ValueError):
        Frame(1.0, CAM, [Detection("a", Pose(np.eye(3), [0, 0, 1]), 10, timestamp=2.0)])
    with pytest.raises(ValueError):
        TrackerConfig(motion_model="nope")
    with pytest.raises(ValueError):
        GateConfig(tau_pred_t=0.0)


# -- association ------------------------------------------------------------------


def two_tracks(sep=0.04):
    tr = Tracker()
    tr.ingest(Frame(0.0, CAM, [det_at(obj(-sep / 2)), det_at(obj(sep / 2))]))
    return tr


def test_detection_on_track_mean_associates():
    tr = Tracker()
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    (s,) = tr.snapshot.states
    assert tr.associate(Detection("a", CAM.inverse() @ s.pose, 3000), CAM, 1 / 30) == s.track_id


def test_far_detection_spawns_new_track():
    tr = Tracker()
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    assert tr.associate(det_at(obj(0.3)), CAM, 1 / 30) is None
    assert tr.associate(det_at(obj(yaw=math.radians(15))), CAM, 1 / 30) is None
    assert tr.associate(det_at(obj(), label="b"), CAM, 1 / 30) is None
    tr.ingest(Frame(1 / 30, CAM, [det_at(obj(0.3))]))
    assert len(tr.tracks) == 2


def test_association_picks_mahalanobis_closest():
    tr = two_tracks(0.04)
    d = det_at(obj(-0.005, 0.01))
    meas = CAM @ d.pose
    meas_cov = measurement_covariance(d.pose, d.n_px, tr.config.cov_model)
    scores = {}
    for s in tr.snapshot.states:
        cov = s.covariance + constant_pose_cov(tr.config.motion_noise, 1 / 30) + meas_cov
        r = lie.log_se3(lie.between(s.pose, meas))
        scores[s.track_id] = r @ np.linalg.inv(cov) @ r
    assert tr.associate(d, CAM, 1 / 30) == min(scores, key=scores.get)


def test_association_uses_covariance_not_euclidean_distance():
    # Track 0 is tight, track 1 is loose; a detection slightly closer to track 0
    # in metres is much further from it in Mahalanobis terms.
    noise = MotionNoise()
    tight = np.eye(6) * 1e-8
    loose = np.eye(6) * 1e-2
    states = (
        TrackState(0, "a", 0.05, CONST_POSE, 0.0, obj(0.0), None, tight, 0.0, 5),
        TrackState(1, "a", 0.05, CONST_POSE, 0.0, obj(0.05), None, loose, 0.0, 5),
    )
    tr = Tracker(TrackerConfig(gates=GateConfig(tau_outlier_t=0.1)))
    tr.tracks = {0: None, 1: None}
    tr._snapshot = Snapshot(0.0, states, tr.config.gates, noise)
    d = det_at(obj(0.024))
    assert tr.associate(d, CAM, 1e-3) == 1
    tr.config.association_covariance = "measurement"
    assert tr.associate(d, CAM, 1e-3) == 0


def test_one_detection_per_track_per_frame():
    tr = Tracker()
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    tr.ingest(Frame(1 / 30, CAM, [det_at(obj()), det_at(obj(0.001))]))
    assert len(tr.tracks) == 2


def test_symmetry_flip_spawns_separate_branch():
    tr = Tracker()
    for k in range(10):
        tr.ingest(Frame(k / 30, CAM, [det_at(obj())]))
    before = tr.graph.value(tr.tracks[0].latest_pose)
    flipped = obj() @ sim.FLIP_Z
    tr.ingest(Frame(10 / 30, CAM, [det_at(obj()), det_at(flipped)]))
    assert len(tr.tracks) == 2
    after = tr.graph.value(tr.tracks[0].latest_pose)
    assert lie.translation_distance(before, after) < 1e-6
    assert lie.rotation_angle(tr.graph.value(tr.tracks[1].latest_pose).R.T @ flipped.R) < 1e-6


# -- prediction -------------------------------------------------------------------


def state(tid, x, cov_scale, label="a", twist=None, motion=CONST_POSE):
    cov = np.eye(12 if twist is not None else 6) * cov_scale
    return TrackState(tid, label, 0.1, motion, 0.0, obj(x), twist, cov, 0.0, 1)


def test_gated_track_not_emitted():
    snap = Snapshot(0.0, (state(0, 0.0, 1e-2),), GateConfig(), MotionNoise())
    assert snap.predict(0.0) == []
    snap = Snapshot(0.0, (state(0, 0.0, 1e-8),), GateConfig(), MotionNoise())
    assert [p.track_id for p in snap.predict(0.0)] == [0]


def test_overlapping_same_label_tracks_keep_most_confident():
    snap = Snapshot(0.0, (state(0, 0.0, 1e-8), state(1, 0.01, 2e-8)), GateConfig(), MotionNoise())
    (cands,) = [snap.candidates(0.0)]
    assert cands[0][2] < cands[1][2]
    assert [p.track_id for p in select_predictions(cands, 1.0, 1.0, 0.0)] == [0]
    # different labels never suppress each other
    snap = Snapshot(0.0, (state(0, 0.0, 1e-8), state(1, 0.01, 2e-8, label="b")), GateConfig(), MotionNoise())
    assert len(snap.predict(0.0)) == 2


def test_ellipsoid_volume():
    assert np.isclose(ellipsoid_volume(np.diag([1.0, 4.0, 9.0])), 4 / 3 * math.pi * 6)


def test_extrapolation_rules():
    noise = MotionNoise()
    s = state(0, 0.0, 1e-6)
    pose, cov = extrapolate(s, 0.0, noise)
    assert pose.allclose(s.pose) and np.allclose(cov, s.covariance)
    _, c1 = extrapolate(s, 0.1, noise)
    _, c2 = extrapolate(s, 0.2, noise)
    assert np.allclose(c2 - s.covariance, 2 * (c1 - s.covariance))
    with pytest.raises(ValueError):
        extrapolate(s, -0.1, noise)


def test_constant_velocity_extrapolation_matches_motion():
    twist = np.array([0.1, 0, 0, 0, 0, 0])
    s = state(0, 0.0, 1e-8, twist=twist, motion=CONST_VEL)
    pose, cov = extrapolate(s, 0.5, MotionNoise())
    traj = sim.Trajectory(s.pose, [sim.Segment(0.0, 10.0, twist)])
    assert pose.allclose(traj.pose(0.5), atol=1e-12)
    assert np.isclose(pose.t[0] - s.pose.t[0], 0.05)
    assert cov.shape == (6, 6) and np.all(np.linalg.eigvalsh(cov) > 0)


def test_tracker_follows_moving_object():
    twist = np.array([0.1, 0.0, 0.0, 0.0, 0.0, 0.0])
    scene = sim.Scenario(
        3.0,
        30.0,
        [sim.SimObject("a", 0.05, sim.Trajectory(obj(), [sim.Segment(0.0, 10.0, twist)]))],
        sim.Trajectory.static(CAM),
        sim.CorruptionConfig(dropout=0.0, outlier=0.0),
        seed=3,
    )
    truth, frames = sim.generate(scene)
    tr = Tracker(TrackerConfig(motion_model=CONST_VEL))
    for f in frames:
        tr.ingest(f)
    (s,) = tr.snapshot.states
    assert np.allclose(s.twist[:3], twist[:3], atol=0.03)
    # 0.5 s past the last frame, compare with the ground-truth continuation
    pose, _ = extrapolate(s, 0.5, tr.config.motion_noise)
    future = scene.objects[0].trajectory.pose(frames[-1].timestamp + 0.5)
    assert lie.translation_distance(pose, future) < 0.02


def test_gate_closes_during_occlusion_and_reopens():
    scene = sim.make_static_scene(2, seed=4, duration=4.0)
    scene.corruption = sim.CorruptionConfig(dropout=0.0, outlier=0.0, occluders=[sim.Occluder(1.5, 2.5)])
    truth, frames = sim.generate(scene)
    cfg = TrackerConfig(gates=GateConfig(tau_pred_t=1e-6, tau_pred_r=1e-4))
    tr = Tracker(cfg)
    emitted = []
    for f in frames:
        tr.ingest(f)
        emitted.append(len(tr.predict()))
    ts = np.array([f.timestamp for f in frames])
    assert all(e == 2 for e, t in zip(emitted, ts) if 1.0 <= t < 1.5)
    assert any(e < 2 for e, t in zip(emitted, ts) if 1.5 <= t < 2.5)
    assert all(e == 2 for e, t in zip(emitted, ts) if t >= 3.0)


def test_predict_is_snapshot_based():
    tr = Tracker()
    assert tr.predict() == []
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    snap = tr.snapshot
    a = tr.predict(0.5)
    tr.ingest(Frame(0.1, CAM, [det_at(obj(0.001))]))
    b = snap.predict(0.5)
    assert [p.pose.t.tolist() for p in a] == [p.pose.t.tolist() for p in b]


# -- window and lifecycle ---------------------------------------------------------


def test_window_bounds_graph_size():
    cfg = TrackerConfig(gates=GateConfig(horizon=0.5))
    tr = Tracker(cfg)
    for k in range(60):
        tr.ingest(Frame(k / 30, CAM, [det_at(obj())]))
    times = {v.timestamp for v in tr.graph.variables.values()}
    assert len(times) == 15
    assert count(tr.graph, LinearPriorFactor) == 1


def test_delete_mode_leaves_no_priors():
    tr = Tracker(TrackerConfig(window_mode="delete", gates=GateConfig(horizon=0.5)))
    for k in range(40):
        tr.ingest(Frame(k / 30, CAM, [det_at(obj())]))
    assert count(tr.graph, LinearPriorFactor) == 0
    assert len(tr.tracks) == 1


def test_tracks_retire_after_silence():
    cfg = TrackerConfig(gates=GateConfig(horizon=0.5))
    tr = Tracker(cfg)
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    for k in range(1, 40):
        tr.ingest(Frame(k / 30, CAM, []))
    assert tr.tracks == {} and len(tr.retired) == 1
    assert all(v.owner == "camera" for v in tr.graph.variables.values())


def test_same_input_same_output():
    scene = sim.make_static_scene(3, seed=5, duration=2.0)
    _, frames = sim.generate(scene)

    def run():
        tr = Tracker()
        out = []
        for f in frames:
            tr.ingest(f)
            out.append([p.to_dict() for p in tr.predict()])
        return out

    assert run() == run()


def test_tracker_state_can_be_copied():
    scene = sim.make_static_scene(2, seed=6, duration=1.0)
    _, frames = sim.generate(scene)
    tr = Tracker()
    for f in frames[:-1]:
        tr.ingest(f)
    twin = copy.deepcopy(tr)
    tr.ingest(frames[-1])
    twin.ingest(frames[-1])
    assert [p.to_dict() for p in tr.predict()] == [p.to_dict() for p in twin.predict()]


def test_delete_mode_drops_tracks_without_detections_in_window():
    tr = Tracker(TrackerConfig(window_mode="delete", gates=GateConfig(horizon=0.2)))
    tr.ingest(Frame(0.0, CAM, [det_at(obj())]))
    for k in range(1, 10):
        tr.ingest(Frame(k / 30, CAM, []))
    assert tr.tracks == {} and len(tr.retired) == 1


@pytest.mark.parametrize("motion", [CONST_POSE, CONST_VEL])
def test_delete_mode_survives_dropout(motion):
    scene = sim.make_dynamic_scene(3, seed=2, duration=3.0)
    _, frames = sim.generate(scene)
    tr = Tracker(TrackerConfig(motion_model=motion, window_mode="delete", gates=GateConfig(horizon=0.1)))
    for f in frames:
        tr.ingest(f)
        assert all(s.covariance is not None for s in tr.snapshot.states)
        assert len({v.timestamp for v in tr.graph.variables.values()}) <= 3
    if motion == CONST_VEL:
        # every surviving track keeps exactly one twist prior
        for t in tr.active_tracks():
            priors = [f for f in tr.graph.factors.values() if isinstance(f, VectorPriorFactor) and f.keys[0] in {v for _, v in t.twists}]
            assert len(priors) == 1
