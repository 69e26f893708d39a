import numpy as np
import pytest

from slamkit.errors import SynchronizationError
from slamkit.eval.metrics import compute_ape
from slamkit.eval.synthetic import R_CB, SyntheticScene, generate_synthetic
from slamkit.frontends import FrameBundle, KeypointFrontend
from slamkit.geometry import CameraModel, CameraRig, RigidTransform
from slamkit.multicam import (
    FrustumGraph,
    MultiCamTracker,
    TrackerConfig,
    build_frustum_graph,
    multicam_step,
    overlap_ratio,
)
from slamkit.pipeline import PipelineConfig, run
from slamkit.solvers import reprojection_blocks, solve_pnp

CAM = CameraModel.from_fov(640, 480, 90.0)


def _pair(baseline, cam=CAM, yaw=0.0):
    """Camera 1 sits ``baseline`` along camera 0's +x; optional yaw about camera 0's y."""
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
    return CameraRig(((cam, RigidTransform.identity()), (cam, RigidTransform.from_matrix(R, -R @ [baseline, 0, 0]))))


def _discrete_overlap(cam, baseline, d, s):
    # independent count: a sample column u maps to u - f b / d in the second camera; rows map to themselves
    shift = cam.fx * baseline / d
    inside = 0
    for k in range(s):
        u = (k + 0.5) * cam.width / s - 0.5
        if 0 <= u - shift <= cam.width - 1:
            inside += 1
    return inside / s


def test_colocated_cameras_overlap_fully():
    g = build_frustum_graph(_pair(0.0))
    assert g.edges == {(0, 1): 1.0, (1, 0): 1.0}


def test_opposite_cameras_have_no_edges():
    assert build_frustum_graph(_pair(0.0, yaw=np.pi)).edges == {}


@pytest.mark.parametrize("b", [0.1, 0.5, 1.0, 2.0, 3.0, 5.0])
def test_stereo_overlap_matches_analytic_count(b):
    r = overlap_ratio(_pair(b), 0, 1, 3.0, 16)
    assert abs(r - _discrete_overlap(CAM, b, 3.0, 16)) < 1e-6
    # the reverse direction shifts the other way by the same amount
    assert abs(overlap_ratio(_pair(b), 1, 0, 3.0, 16) - r) < 1e-6


def test_dense_grid_approaches_continuous_overlap():
    b, d, s = 1.0, 3.0, 512
    # samples cover u in [-0.5, W - 0.5]; shifted samples must land in [0, W - 1]
    cont = (CAM.width - 1 - CAM.fx * b / d) / CAM.width
    assert abs(overlap_ratio(_pair(b), 0, 1, d, s) - cont) < 2.0 / s


def test_graph_invariant_under_rig_motion():
    rig = generate_synthetic(SyntheticScene(rig="quad-stereo", n_frames=2, n_landmarks=10)).rig
    G = RigidTransform.from_rotvec([0.3, -0.7, 1.1], [2.0, -1.0, 0.5])
    moved = CameraRig(tuple((c, T @ G) for c, T in rig.cameras))
    a, b = build_frustum_graph(rig), build_frustum_graph(moved)
    assert a.edges.keys() == b.edges.keys()
    for k in a.edges:
        assert abs(a.edges[k] - b.edges[k]) < 1e-9


def test_quad_rig_tracks_from_left_cameras():
    rig = generate_synthetic(SyntheticScene(rig="quad-stereo", n_frames=2, n_landmarks=10)).rig
    g = build_frustum_graph(rig)
    assert set(g.edges) == {(0, 1), (1, 0), (2, 3), (3, 2), (4, 5), (5, 4), (6, 7), (7, 6)}
    assert g.tracking_edges() == [(0, 1), (2, 3), (4, 5), (6, 7)]
    assert g.tracked_cameras() == [0, 2, 4, 6]


def test_graph_validation():
    with pytest.raises(ValueError):
        FrustumGraph(2, {(0, 0): 1.0})
    with pytest.raises(ValueError):
        FrustumGraph(2, {(0, 1): 0.1}, threshold=0.2)
    assert FrustumGraph(3, {(0, 1): 0.5}).tracked_cameras() == [0, 2]
    with pytest.raises(ValueError):
        build_frustum_graph(CameraRig(tuple((CAM, RigidTransform.identity()) for _ in range(33))))


def test_quad_stereo_square_zero_noise():
    d = generate_synthetic(SyntheticScene(trajectory="square", rig="quad-stereo", n_frames=100, n_landmarks=1500))
    res = run(PipelineConfig(mode="multi-stereo"), d, initial_pose=d.ground_truth.poses[0])
    assert compute_ape(d.ground_truth, res.trajectory, "none") < 1e-3


def test_occlusion_keeps_tracking_with_one_pair():
    occ = tuple((c, 1.0, 2.5) for c in range(2, 8))  # only the front pair sees anything in [1, 2.5] s
    d = generate_synthetic(SyntheticScene(trajectory="square", rig="quad-stereo", n_frames=80, n_landmarks=1500, occlusions=occ))
    res = run(PipelineConfig(mode="multi-stereo"), d, initial_pose=d.ground_truth.poses[0])
    assert "lost" not in res.odometry.status
    P = res.odometry.positions
    step = np.linalg.norm(np.diff(P, axis=0), axis=1)
    assert step.max() <= 2 * np.median(step)
    assert compute_ape(d.ground_truth, res.odometry, "none") < 1e-3


def _permuted(data, order):
    rig = CameraRig(tuple(data.rig.cameras[k] for k in order))
    frames = [FrameBundle(f.timestamp, None, [f.keypoints[k] for k in order], None, f.imu) for f in data.frames]
    return rig, frames


def test_keyframe_flags_invariant_to_camera_order():
    d = generate_synthetic(SyntheticScene(trajectory="circle", rig="quad-stereo", n_frames=40, n_landmarks=1000))
    flags = []
    poses = []
    for order in ([0, 1, 2, 3, 4, 5, 6, 7], [4, 5, 0, 1, 6, 7, 2, 3]):
        rig, frames = _permuted(d, order)
        res = run(PipelineConfig(mode="multi-stereo"), frames, rig=rig, initial_pose=d.ground_truth.poses[0])
        flags.append([s == "keyframe" for s in res.odometry.status])
        poses.append(res.odometry.positions)
    assert flags[0] == flags[1]
    assert np.abs(poses[0] - poses[1]).max() < 1e-9


def _cost(pairs, rig, T):
    P = np.array([p for p, obs in pairs for _ in obs])
    cams = np.array([k for _, obs in pairs for k in obs])
    pix = np.array([px for _, obs in pairs for px in obs.values()])
    r, _, _ = reprojection_blocks(rig, [T], np.zeros(len(P), int), P, np.arange(len(P)), cams, pix)
    return float(np.sum(r * r))


def test_pnp_uses_every_camera():
    d = generate_synthetic(SyntheticScene(rig="quad-stereo", n_frames=2, n_landmarks=800, pixel_sigma=1.0, seed=3))
    rig, T_true = d.rig, d.ground_truth.poses[1]
    pairs = []
    for lm, p in enumerate(d.landmarks):
        obs = {k: np.asarray(d.frames[1].keypoints[k][lm]) for k in range(len(rig)) if lm in d.frames[1].keypoints[k]}
        if obs:
            pairs.append((p, obs))
    init = RigidTransform.from_rotvec([0.01, -0.02, 0.01], [0.05, 0.02, -0.03]) @ T_true
    full = solve_pnp(pairs, rig, init, huber=None).pose
    c_full = _cost(pairs, rig, full)
    for subset in ([0, 1], [2, 3], [0, 1, 4, 5]):
        sub = [(p, {k: v for k, v in o.items() if k in subset}) for p, o in pairs]
        sub = [(p, o) for p, o in sub if o]
        T_sub = solve_pnp(sub, rig, init, huber=None).pose
        assert c_full <= _cost(pairs, rig, T_sub) + 1e-9


def test_unsynchronized_bundle_rejected():
    d = generate_synthetic(SyntheticScene(rig="stereo", n_frames=3, n_landmarks=300))
    tr = MultiCamTracker(d.rig, KeypointFrontend())
    f = d.frames[0]
    bad = FrameBundle(f.timestamp, None, f.keypoints, None, [], [f.timestamp, f.timestamp + 0.01])
    with pytest.raises(SynchronizationError):
        tr.step(bad)
    with pytest.raises(SynchronizationError):
        tr.step(FrameBundle(f.timestamp, None, f.keypoints[:1], None, []))


def test_single_pair_matches_stereo_pipeline():
    d = generate_synthetic(SyntheticScene(trajectory="circle", rig="stereo", n_frames=40, n_landmarks=1000, pixel_sigma=0.5))
    a = run(PipelineConfig(mode="stereo"), d, initial_pose=d.ground_truth.poses[0])
    b = run(PipelineConfig(mode="multi-stereo"), d, initial_pose=d.ground_truth.poses[0])
    assert a.odometry.status == b.odometry.status
    assert np.array_equal(a.odometry.positions, b.odometry.positions)


def test_functional_step_wrapper():
    d = generate_synthetic(SyntheticScene(trajectory="circle", rig="stereo", n_frames=200, n_landmarks=800))
    g = build_frustum_graph(d.rig)
    state = MultiCamTracker(d.rig, KeypointFrontend(), g, TrackerConfig())
    state.initial_pose = d.ground_truth.poses[0]
    flags = []
    for f, T in zip(d.frames[:5], d.ground_truth.poses):
        pose, state, kf = multicam_step(f, state, g)
        flags.append(kf)
        assert pose.allclose(T, 1e-9)
    assert flags[0]
    with pytest.raises(ValueError):
        multicam_step(d.frames[0], state, build_frustum_graph(d.rig))


def test_rig_body_axes():
    # forward camera of the synthetic rig looks down body +x
    assert np.allclose(R_CB @ [1, 0, 0], [0, 0, 1])
