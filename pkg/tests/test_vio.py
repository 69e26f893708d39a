import numpy as np
import pytest

from slamkit.errors import NotReadyError, TimestampError
from slamkit.geometry import CameraModel, CameraRig, RigidTransform, so3_log
from slamkit.localmap import MapSnapshot, Observation
from slamkit.solvers import sparse_bundle_adjustment
from slamkit.vio import (
    GravityEstimate,
    ImuSample,
    PriorFactor,
    VioState,
    estimate_gravity,
    imu_residual,
    preintegrate,
    propagate,
    vi_pose_estimate,
    vi_sba,
    visual_blocks,
)

from _fd import numeric_jacobian, rel_err
from _traj import SineTrajectory, rx

CAM = CameraModel(400.0, 400.0, 319.5, 239.5, 640, 480)
# camera looks along body +x: z_c = x_b, x_c = -y_b, y_c = -z_b
T_CB = RigidTransform.from_matrix(np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0.0]]), [0.02, -0.01, 0.0])
RIG = CameraRig([(CAM, T_CB), (CAM, RigidTransform(translation=[-0.1, 0, 0]) @ T_CB)])


def samples(tr, t0, t1, hz, ba=np.zeros(3), bg=np.zeros(3)):
    ts = np.linspace(t0, t1, int(round((t1 - t0) * hz)) + 1)
    return [ImuSample(t, tr.gyro(t) + bg, tr.accel(t) + ba) for t in ts]


def rodrigues(w):
    th = np.linalg.norm(w)
    if th < 1e-15:
        return np.eye(3)
    k = w / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K


def fine_integration(tr, t0, t1, h=1e-4):
    """10 kHz integration of the continuous readings (independent oracle)."""
    n = int(round((t1 - t0) / h))
    R, v, p = np.eye(3), np.zeros(3), np.zeros(3)
    for i in range(n):
        t = t0 + i * h
        R1 = R @ rodrigues(tr.gyro(t + h / 2) * h)
        a = 0.5 * (R @ tr.accel(t) + R1 @ tr.accel(t + h))
        p = p + v * h + 0.5 * a * h * h
        v = v + a * h
        R = R1
    return R, v, p


def truth_state(tr, t, ba=np.zeros(3), bg=np.zeros(3)):
    return VioState(RigidTransform.from_matrix(tr.rotation(t), tr.position(t)), tr.velocity(t), ba, bg)


class TestPreintegration:
    def test_zero_gyro_identity(self):
        s = [ImuSample(0.01 * i, np.zeros(3), [0.3, -1.0, 9.0]) for i in range(50)]
        np.testing.assert_array_equal(preintegrate(s).delta_R, np.eye(3))

    def test_constant_accel(self):
        a = np.array([0.5, -0.2, 1.5])
        s = [ImuSample(0.01 * i, np.zeros(3), a) for i in range(101)]
        pre = preintegrate(s)
        assert pre.dt == pytest.approx(1.0)
        np.testing.assert_allclose(pre.delta_v, a, atol=1e-12)
        np.testing.assert_allclose(pre.delta_p, a / 2, atol=1e-12)

    def test_fine_step_oracle(self):
        tr = SineTrajectory(1, amp_p=0.5, freq=(0.1, 0.3))
        pre = preintegrate(samples(tr, 0.3, 0.8, 200))
        R, v, p = fine_integration(tr, 0.3, 0.8)
        assert np.max(np.abs(so3_log(pre.delta_R.T @ R))) < 1e-5
        assert np.max(np.abs(pre.delta_v - v)) < 1e-5
        assert np.max(np.abs(pre.delta_p - p)) < 1e-5

    def test_non_monotone(self):
        s = [ImuSample(t, np.zeros(3), np.zeros(3)) for t in (0.0, 0.02, 0.01)]
        with pytest.raises(TimestampError):
            preintegrate(s)

    def test_covariance_psd(self):
        tr = SineTrajectory(2)
        pre = preintegrate(samples(tr, 0.0, 0.5, 200))
        np.testing.assert_allclose(pre.covariance, pre.covariance.T, atol=0)
        assert np.linalg.eigvalsh(pre.covariance).min() > -1e-18

    def test_bias_jacobians_fd(self):
        tr = SineTrajectory(3)
        ss = samples(tr, 0.0, 0.3, 200)
        base = preintegrate(ss)

        def f(b):
            q = preintegrate(ss, (b[:3], b[3:]))
            return np.concatenate([so3_log(base.delta_R.T @ q.delta_R), q.delta_v, q.delta_p])

        assert rel_err(base.bias_jacobian, numeric_jacobian(f, np.zeros(6))) < 1e-5

    def test_retarget_accel_bias_exact(self):
        tr = SineTrajectory(4, amp_p=0.5, freq=(0.1, 0.3))
        pre = preintegrate(samples(tr, 0.0, 0.5, 200))
        rng = np.random.default_rng(0)
        for _ in range(10):
            db = rng.normal(size=3)
            db *= rng.uniform(0, 0.05) / np.linalg.norm(db)
            full = preintegrate(pre.samples, (db, np.zeros(3)))
            R, v, p = pre.corrected(db, np.zeros(3))
            assert np.max(np.abs(so3_log(full.delta_R.T @ R))) < 1e-6
            assert np.max(np.abs(full.delta_v - v)) < 1e-6
            assert np.max(np.abs(full.delta_p - p)) < 1e-6

    def test_retarget_gyro_bias_second_order(self):
        tr = SineTrajectory(4, amp_p=0.5, freq=(0.1, 0.3))
        pre = preintegrate(samples(tr, 0.0, 0.1, 200))
        d = np.array([0.003, -0.002, 0.002])
        errs = []
        for s in (1.0, 0.1):
            full = preintegrate(pre.samples, (np.zeros(3), d * s))
            R, v, p = pre.corrected(np.zeros(3), d * s)
            errs.append(max(np.abs(full.delta_v - v).max(), np.abs(full.delta_p - p).max(), np.abs(so3_log(full.delta_R.T @ R)).max()))
        assert errs[0] < 1e-6
        assert errs[1] < errs[0] / 50  # quadratic in the bias change

    def test_retarget_reintegrates_large_change(self):
        tr = SineTrajectory(5)
        pre = preintegrate(samples(tr, 0.0, 0.2, 200))
        new = pre.retarget(np.zeros(3), np.array([0.1, 0, 0]), threshold=1e-2)
        ref = preintegrate(pre.samples, (np.zeros(3), np.array([0.1, 0, 0])))
        np.testing.assert_array_equal(new.delta_v, ref.delta_v)


class TestResidual:
    def test_forward_integration_consistent(self):
        tr = SineTrajectory(6)
        pre = preintegrate(samples(tr, 1.0, 1.4, 200))
        grav = GravityEstimate.from_direction([0.1, 0.0, 1.0])
        s_i = VioState(RigidTransform.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3]), [0.3, -0.2, 0.1], [0.01, 0, 0], [0, 0.002, 0])
        s_j = propagate(s_i, pre, grav)
        assert np.linalg.norm(imu_residual(s_i, s_j, pre, grav).r) < 1e-6

    def test_truth_states_consistent(self):
        tr = SineTrajectory(6, amp_p=0.5, freq=(0.1, 0.3))
        pre = preintegrate(samples(tr, 1.0, 1.4, 1000))
        grav = GravityEstimate()
        r = imu_residual(truth_state(tr, 1.0), truth_state(tr, 1.4), pre, grav).r
        assert np.linalg.norm(r) < 1e-6

    def test_zero_motion(self):
        s = [ImuSample(0.01 * i, np.zeros(3), [0, 0, 9.81]) for i in range(30)]
        pre = preintegrate(s)
        st = VioState(RigidTransform.identity())
        np.testing.assert_allclose(imu_residual(st, st, pre, GravityEstimate()).r, 0, atol=1e-12)

    def test_jacobians_fd(self):
        rng = np.random.default_rng(7)
        tr = SineTrajectory(7)
        pre = preintegrate(samples(tr, 0.0, 0.3, 200), (np.array([0.01, -0.02, 0.0]), np.array([0.001, 0.0, -0.002])))
        for _ in range(10):
            s_i = VioState(RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3)), rng.normal(size=3),
                           rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01)
            s_j = s_i.retract(rng.normal(size=15) * 0.1)
            grav = GravityEstimate(RigidTransform.from_rotvec(rng.normal(size=3) * 0.2).R)
            res = imu_residual(s_i, s_j, pre, grav)
            Ji = numeric_jacobian(lambda d: imu_residual(s_i.retract(d), s_j, pre, grav).r, np.zeros(15))
            Jj = numeric_jacobian(lambda d: imu_residual(s_i, s_j.retract(d), pre, grav).r, np.zeros(15))
            Jg = numeric_jacobian(lambda d: imu_residual(s_i, s_j, pre, grav.retract(d)).r, np.zeros(2))
            assert rel_err(res.J_i, Ji) < 1e-5
            assert rel_err(res.J_j, Jj) < 1e-5
            assert rel_err(res.J_g, Jg) < 1e-5

    def test_visual_jacobian_fd(self):
        rng = np.random.default_rng(8)
        s = VioState(RigidTransform.from_rotvec([0.1, -0.2, 0.3], [0.5, 0.1, -0.2]))
        P = s.pose.apply(T_CB.inverse().apply(random_cam_points(rng, 5)))
        cams = np.zeros(5, int)
        pix = np.zeros((5, 2))
        _, Jp, _ = visual_blocks(RIG, s, P, cams, pix)
        num = numeric_jacobian(lambda d: visual_blocks(RIG, s.retract(np.concatenate([d, np.zeros(9)])), P, cams, pix)[0].ravel(), np.zeros(6))
        assert rel_err(Jp.reshape(-1, 6), num) < 1e-5


def random_cam_points(rng, n):
    z = rng.uniform(3, 6, n)
    return np.column_stack([rng.uniform(-0.5, 0.5, n) * z, rng.uniform(-0.4, 0.4, n) * z, z])


class TestGravity:
    def _setup(self, tr, times, hz=1000):
        poses = [RigidTransform.from_matrix(tr.rotation(t), tr.position(t)) for t in times]
        pres = [preintegrate(samples(tr, a, b, hz)) for a, b in zip(times[:-1], times[1:])]
        return poses, pres

    def test_tilted_gravity(self):
        g_true = rx(np.radians(10.0)) @ np.array([0, 0, 9.81])
        tr = SineTrajectory(9, amp_p=0.5, freq=(0.1, 0.3), gravity=g_true)
        poses, pres = self._setup(tr, np.linspace(0.0, 3.0, 7))
        res = estimate_gravity(poses, pres)
        err = np.arccos(np.clip(res.gravity.g @ g_true / 9.81**2, -1, 1))
        assert err < 1e-3
        assert np.linalg.norm(res.gravity.g) == pytest.approx(9.81, abs=1e-12)
        vt = np.array([tr.velocity(t) for t in np.linspace(0.0, 3.0, 7)])
        assert np.max(np.abs(res.velocities - vt)) < 1e-4

    def test_zero_bias_recovered(self):
        # keyframe poses by forward propagation so the IMU data is exactly consistent
        g_true = rx(np.radians(10.0)) @ np.array([0, 0, 9.81])
        tr = SineTrajectory(9, amp_p=0.5, freq=(0.1, 0.3), gravity=g_true)
        times = np.linspace(0.0, 3.0, 7)
        _, pres = self._setup(tr, times, 200)
        grav = GravityEstimate.from_direction(g_true)
        states = [truth_state(tr, 0.0)]
        for pre in pres:
            states.append(propagate(states[-1], pre, grav))
        res = estimate_gravity([s.pose for s in states], pres)
        assert np.arccos(np.clip(res.gravity.g @ g_true / 9.81**2, -1, 1)) < 1e-6
        assert np.max(np.abs(res.accel_bias)) < 1e-6
        assert np.max(np.abs(res.gyro_bias)) < 1e-6

    def test_stationary_not_ready(self):
        s = [ImuSample(0.005 * i, np.zeros(3), [0, 0, 9.81]) for i in range(601)]
        pres = [preintegrate(s[100 * i : 100 * i + 101]) for i in range(6)]
        poses = [RigidTransform.identity()] * 7
        with pytest.raises(NotReadyError):
            estimate_gravity(poses, pres)

    def test_too_few_poses(self):
        tr = SineTrajectory(9)
        poses, pres = self._setup(tr, [0.0, 0.5], 200)
        with pytest.raises(NotReadyError):
            estimate_gravity(poses, pres)


def vi_scene(seed=10, t0=1.0, t1=1.3):
    rng = np.random.default_rng(seed)
    tr = SineTrajectory(seed, amp_p=0.3, amp_r=0.2, freq=(0.1, 0.3))
    grav = GravityEstimate()
    pre = preintegrate(samples(tr, t0, t1, 200))
    s0 = truth_state(tr, t0)
    s1 = propagate(s0, pre, grav)
    pts = np.vstack([s.pose.apply(T_CB.inverse().apply(random_cam_points(rng, 25))) for s in (s0, s1)])
    return tr, grav, pre, s0, s1, pts


def observe(state, pts):
    pairs = []
    T_bw = state.pose.inverse()
    for p in pts:
        obs = {}
        for k in range(len(RIG)):
            pc = RIG.camera_from_world(k, T_bw).apply(p)
            if pc[2] > 0.1:
                px = np.array([CAM.fx * pc[0] / pc[2] + CAM.cx, CAM.fy * pc[1] / pc[2] + CAM.cy])
                if CAM.in_bounds(px):
                    obs[k] = px
        if obs:
            pairs.append((p, obs))
    return pairs


def state_err(a, b):
    return np.max(np.abs(a.local(b)))


class TestViPose:
    def test_noise_free_recovery(self):
        _, grav, pre, s0, s1, pts = vi_scene()
        init = s1.retract(np.concatenate([[0.01, -0.01, 0.005], [0.05, 0.02, -0.03], [0.1, 0, 0.05], np.zeros(6)]))
        res = vi_pose_estimate(s0, init, pre, grav, RIG, observe(s0, pts), observe(s1, pts), PriorFactor.isotropic(s0))
        assert state_err(res.curr, s1) < 1e-6
        assert state_err(res.prev, s0) < 1e-6
        assert res.cost <= res.initial_cost

    def test_no_visual_equals_propagation(self):
        _, grav, pre, s0, s1, _ = vi_scene()
        res = vi_pose_estimate(s0, None, pre, grav, RIG, (), (), PriorFactor.isotropic(s0))
        assert state_err(res.prev, s0) < 1e-9
        assert state_err(res.curr, propagate(s0, pre, grav)) < 1e-9

    def test_tiny_prior_pins_previous(self):
        _, grav, pre, s0, s1, pts = vi_scene()
        s0_off = s0.retract(np.concatenate([[0.01, 0, 0], [0.02, 0, 0], np.zeros(9)]))
        prior = PriorFactor(s0_off, np.eye(15) * 1e-24)
        res = vi_pose_estimate(s0_off, None, pre, grav, RIG, observe(s0, pts), observe(s1, pts), prior)
        assert np.linalg.norm(res.prev.local(s0_off)) < 1e-9


def sba_window(seed=11, n=5):
    rng = np.random.default_rng(seed)
    tr = SineTrajectory(seed, amp_p=0.3, amp_r=0.2, freq=(0.1, 0.3))
    grav = GravityEstimate()
    times = np.linspace(0.5, 0.5 + 0.25 * (n - 1), n)
    pres = [preintegrate(samples(tr, a, b, 200)) for a, b in zip(times[:-1], times[1:])]
    states = [truth_state(tr, times[0])]
    for pre in pres:
        states.append(propagate(states[-1], pre, grav))
    pts = np.vstack([s.pose.apply(T_CB.inverse().apply(random_cam_points(rng, 12))) for s in states])
    obs = []
    for i, s in enumerate(states):
        for p, o in observe(s, pts):
            j = int(np.flatnonzero(np.all(pts == p, axis=1))[0])
            for k, px in o.items():
                obs.append((i, j, k, tuple(px)))
    lms = {j: pts[j] for j in range(len(pts))}
    return grav, pres, states, lms, obs


class TestViSba:
    def test_perturbed_recovery(self):
        rng = np.random.default_rng(12)
        grav, pres, states, lms, obs = sba_window()
        init = [states[0]] + [s.retract(np.concatenate([rng.normal(size=3) * 0.005, rng.normal(size=3) * 0.01,
                                                        rng.normal(size=3) * 0.01, np.zeros(6)])) for s in states[1:]]
        lm0 = {j: p + rng.normal(size=3) * 0.01 for j, p in lms.items()}
        res = vi_sba(init, RIG, lm0, obs, pres, grav)
        for a, b in zip(res.states, states):
            assert state_err(a, b) < 1e-6
        for j, p in lms.items():
            assert np.max(np.abs(res.landmarks[j] - p)) < 1e-6

    def test_converged_input_unchanged(self):
        grav, pres, states, lms, obs = sba_window()
        res = vi_sba(states, RIG, lms, obs, pres, grav)
        for a, b in zip(res.states, states):
            assert state_err(a, b) <= 1e-12
        for j, p in lms.items():
            assert np.max(np.abs(res.landmarks[j] - p)) <= 1e-12

    def test_zero_imu_weight_matches_sba(self):
        rng = np.random.default_rng(13)
        grav, pres, states, lms, obs = sba_window()
        noisy = [(i, j, k, tuple(np.asarray(px) + rng.normal(size=2) * 0.5)) for i, j, k, px in obs]
        lm0 = {j: p + rng.normal(size=3) * 0.01 for j, p in lms.items()}
        res = vi_sba(states, RIG, lm0, noisy, pres, grav, imu_weight=0.0)
        snap = MapSnapshot(
            RIG,
            {i: s.pose.inverse() for i, s in enumerate(states)},
            {j: np.array(p) for j, p in lm0.items()},
            tuple(Observation(j, i, k, px) for i, j, k, px in noisy),
            frozenset([0]),
        )
        ref = sparse_bundle_adjustment(snap)
        for i, s in enumerate(res.states):
            assert np.max(np.abs(s.pose.inverse().matrix() - ref.poses[i].matrix())) < 1e-8
        for j in lms:
            assert np.max(np.abs(res.landmarks[j] - ref.landmarks[j])) < 1e-8
