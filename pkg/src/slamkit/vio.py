"""Visual-inertial estimation: IMU preintegration, gravity alignment,
two-frame VI pose estimation and VI bundle adjustment.

Conventions
-----------
* ``VioState.pose`` is ``T_wb`` (world from body). Rotation is perturbed on
  the right, ``R <- R Exp(dtheta)``; position, velocity and biases are
  additive. A state tangent is ordered ``[dtheta, dp, dv, dba, dbg]``.
* The accelerometer measures specific force. ``GravityEstimate.g`` is the
  reading of a level accelerometer at rest, expressed in world axes, so the
  world acceleration is ``R a_m - g``.
* Preintegrated quantities and residuals are ordered ``[R, v, p]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, NoConvergenceError, NotReadyError, TimestampError
from .geometry import (
    CameraRig,
    NoiseModel,
    RigidTransform,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .solvers import HUBER_DELTA, LmSettings, levenberg_marquardt, reprojection_blocks, schur_solve

GRAVITY = 9.81
G0 = np.array([0.0, 0.0, GRAVITY])


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities and bias random walks."""

    gyro_density: float = 1.7e-4  # rad/s/sqrt(Hz)
    accel_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)


@dataclass(frozen=True)
class VioState:
    pose: RigidTransform  # T_wb
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("velocity", "accel_bias", "gyro_bias"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    @property
    def R(self) -> np.ndarray:
        return self.pose.R

    @property
    def p(self) -> np.ndarray:
        return self.pose.t

    def retract(self, d) -> "VioState":
        d = np.asarray(d, dtype=float)
        pose = RigidTransform.from_matrix(self.R @ so3_exp(d[:3]), self.p + d[3:6])
        return VioState(pose, self.velocity + d[6:9], self.accel_bias + d[9:12], self.gyro_bias + d[12:15])

    def local(self, other: "VioState") -> np.ndarray:
        """Tangent ``d`` with ``other.retract(d) == self``."""
        return np.concatenate([
            so3_log(other.R.T @ self.R),
            self.p - other.p,
            self.velocity - other.velocity,
            self.accel_bias - other.accel_bias,
            self.gyro_bias - other.gyro_bias,
        ])


@dataclass(frozen=True)
class GravityEstimate:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def g(self) -> np.ndarray:
        return self.rotation @ G0

    @classmethod
    def from_direction(cls, d) -> "GravityEstimate":
        """Smallest rotation taking +z onto ``d``."""
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        axis = np.cross([0.0, 0.0, 1.0], d)
        s = np.linalg.norm(axis)
        ang = np.arctan2(s, d[2])
        phi = np.zeros(3) if s < 1e-12 else axis / s * ang
        if s < 1e-12 and d[2] < 0:
            phi = np.array([np.pi, 0.0, 0.0])
        return cls(so3_exp(phi))

    def retract(self, d2) -> "GravityEstimate":
        return GravityEstimate(self.rotation @ so3_exp([d2[0], d2[1], 0.0]))

    def jacobian(self) -> np.ndarray:
        """d g / d(2-DoF tangent)."""
        return (-self.rotation @ skew(G0))[:, :2]


# ---------------------------------------------------------- preintegration


@dataclass
class PreintegratedImu:
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    dt: float
    covariance: np.ndarray  # 9x9 over [R, v, p]
    accel_bias: np.ndarray  # linearization point
    gyro_bias: np.ndarray
    bias_jacobian: np.ndarray  # 9x6: d[R, v, p] / d[ba, bg]
    samples: tuple = ()
    noise: ImuNoise = ImuNoise()

    @property
    def J_R_g(self):
        return self.bias_jacobian[0:3, 3:6]

    def corrected(self, ba, bg):
        """First-order bias correction of ``(dR, dv, dp)`` via the stored Jacobians."""
        db = np.concatenate([np.asarray(ba) - self.accel_bias, np.asarray(bg) - self.gyro_bias])
        J = self.bias_jacobian
        dR = self.delta_R @ so3_exp(J[0:3] @ db)
        return dR, self.delta_v + J[3:6] @ db, self.delta_p + J[6:9] @ db

    def retarget(self, ba, bg, threshold: float = 1e-2) -> "PreintegratedImu":
        """New linearization point. Small bias changes reuse the Jacobians,
        larger ones re-integrate the stored samples."""
        db = np.concatenate([np.asarray(ba) - self.accel_bias, np.asarray(bg) - self.gyro_bias])
        if np.linalg.norm(db) < threshold or not self.samples:
            dR, dv, dp = self.corrected(ba, bg)
            return replace(
                self, delta_R=dR, delta_v=dv, delta_p=dp,
                accel_bias=np.asarray(ba, dtype=float), gyro_bias=np.asarray(bg, dtype=float),
            )
        return preintegrate(self.samples, (ba, bg), self.noise)

    def sqrt_information(self) -> np.ndarray:
        C = 0.5 * (self.covariance + self.covariance.T)
        C = C + np.eye(9) * 1e-18
        return np.linalg.cholesky(np.linalg.inv(C)).T


def preintegrate(samples: Sequence[ImuSample], bias=(np.zeros(3), np.zeros(3)), noise: ImuNoise = ImuNoise()) -> PreintegratedImu:
    """Midpoint preintegration between the first and last sample times."""
    samples = tuple(samples)
    if len(samples) < 2:
        raise InsufficientDataError("preintegration needs at least two IMU samples")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise TimestampError("IMU timestamps must be strictly increasing")
    ba = np.asarray(bias[0], dtype=float)
    bg = np.asarray(bias[1], dtype=float)
    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    C = np.zeros((9, 9))
    J = np.zeros((9, 6))
    I3 = np.eye(3)
    for s0, s1 in zip(samples[:-1], samples[1:]):
        h = s1.timestamp - s0.timestamp
        w = 0.5 * (s0.gyro + s1.gyro) - bg
        E = so3_exp(w * h)
        Jr = so3_right_jacobian(w * h)
        R1 = dR @ E
        a0 = s0.accel - ba
        a1 = s1.accel - ba
        am = 0.5 * (dR @ a0 + R1 @ a1)

        # linearized error propagation: x' = A x + B db + G n
        Ma = -0.5 * dR @ skew(a0) - 0.5 * R1 @ skew(a1) @ E.T
        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = Ma * h
        A[6:9, 0:3] = 0.5 * Ma * h * h
        A[6:9, 3:6] = I3 * h
        B = np.zeros((9, 6))
        dadbg = 0.5 * R1 @ skew(a1) @ Jr * h
        dadba = -0.5 * (dR + R1)
        B[0:3, 3:6] = -Jr * h
        B[3:6, 0:3] = dadba * h
        B[3:6, 3:6] = dadbg * h
        B[6:9, 0:3] = 0.5 * dadba * h * h
        B[6:9, 3:6] = 0.5 * dadbg * h * h
        # discrete noise on the midpoint gyro and accel readings
        G = np.zeros((9, 6))
        G[0:3, 0:3] = -Jr * h
        G[3:6, 0:3] = dadbg * h
        G[6:9, 0:3] = 0.5 * dadbg * h * h
        Rm = 0.5 * (dR + R1)
        G[3:6, 3:6] = Rm * h
        G[6:9, 3:6] = 0.5 * Rm * h * h
        Q = np.diag([noise.gyro_density**2 / h] * 3 + [noise.accel_density**2 / h] * 3)
        C = A @ C @ A.T + G @ Q @ G.T
        J = A @ J + B

        dp = dp + dv * h + 0.5 * am * h * h
        dv = dv + am * h
        dR = R1
    U, _, Vt = np.linalg.svd(dR)
    dR = U @ Vt
    return PreintegratedImu(dR, dv, dp, float(ts[-1] - ts[0]), 0.5 * (C + C.T), ba.copy(), bg.copy(), J, samples, noise)


def interpolate_imu(samples: Sequence[ImuSample], t0: float, t1: float) -> list:
    """Samples covering ``[t0, t1]`` with linearly interpolated endpoints."""
    ts = np.array([s.timestamp for s in samples])
    if len(ts) < 2 or t0 < ts[0] - 1e-9 or t1 > ts[-1] + 1e-9 or t1 <= t0:
        raise InsufficientDataError(f"IMU data does not cover [{t0}, {t1}]")
    gyro = np.array([s.gyro for s in samples])
    acc = np.array([s.accel for s in samples])

    def at(t):
        return ImuSample(t, np.array([np.interp(t, ts, gyro[:, i]) for i in range(3)]),
                         np.array([np.interp(t, ts, acc[:, i]) for i in range(3)]))

    inner = [s for s in samples if t0 + 1e-9 < s.timestamp < t1 - 1e-9]
    return [at(t0)] + inner + [at(t1)]


def propagate(state: VioState, pre: PreintegratedImu, gravity: GravityEstimate) -> VioState:
    """Forward prediction of the next state from a preintegrated interval."""
    dR, dv, dp = pre.corrected(state.accel_bias, state.gyro_bias)
    g = gravity.g
    T = pre.dt
    R = state.R @ dR
    v = state.velocity - g * T + state.R @ dv
    p = state.p + state.velocity * T - 0.5 * g * T * T + state.R @ dp
    U, _, Vt = np.linalg.svd(R)
    return VioState(RigidTransform.from_matrix(U @ Vt, p), v, state.accel_bias, state.gyro_bias)


@dataclass
class ImuResidual:
    r: np.ndarray  # 9, ordered [R, v, p]
    J_i: np.ndarray  # 9x15
    J_j: np.ndarray  # 9x15
    J_g: np.ndarray  # 9x2


def imu_residual(s_i: VioState, s_j: VioState, pre: PreintegratedImu, gravity: GravityEstimate) -> ImuResidual:
    """Preintegration residual between two states (bias taken from ``s_i``)."""
    Ri, Rj = s_i.R, s_j.R
    db = np.concatenate([s_i.accel_bias - pre.accel_bias, s_i.gyro_bias - pre.gyro_bias])
    J = pre.bias_jacobian
    phi_b = pre.J_R_g @ db[3:]
    Rc = pre.delta_R @ so3_exp(phi_b)
    g = gravity.g
    T = pre.dt
    dv_m = Ri.T @ (s_j.velocity - s_i.velocity + g * T)
    dp_m = Ri.T @ (s_j.p - s_i.p - s_i.velocity * T + 0.5 * g * T * T)
    rR = so3_log(Rc.T @ Ri.T @ Rj)
    rv = dv_m - (pre.delta_v + J[3:6] @ db)
    rp = dp_m - (pre.delta_p + J[6:9] @ db)

    Jri = so3_right_jacobian_inv(rR)
    Ji = np.zeros((9, 15))
    Jj = np.zeros((9, 15))
    Ji[0:3, 0:3] = -Jri @ Rj.T @ Ri
    Ji[0:3, 12:15] = -Jri @ so3_exp(rR).T @ so3_right_jacobian(phi_b) @ pre.J_R_g
    Jj[0:3, 0:3] = Jri
    Ji[3:6, 0:3] = skew(dv_m)
    Ji[3:6, 6:9] = -Ri.T
    Ji[3:6, 9:15] = -J[3:6]
    Jj[3:6, 6:9] = Ri.T
    Ji[6:9, 0:3] = skew(dp_m)
    Ji[6:9, 3:6] = -Ri.T
    Ji[6:9, 6:9] = -Ri.T * T
    Ji[6:9, 9:15] = -J[6:9]
    Jj[6:9, 3:6] = Ri.T
    dg = gravity.jacobian()
    Jg = np.zeros((9, 2))
    Jg[3:6] = Ri.T @ dg * T
    Jg[6:9] = 0.5 * Ri.T @ dg * T * T
    return ImuResidual(np.concatenate([rR, rv, rp]), Ji, Jj, Jg)


def bias_walk_sqrt_info(pre: PreintegratedImu) -> np.ndarray:
    n = pre.noise
    sig = np.array([n.accel_walk] * 3 + [n.gyro_walk] * 3) * np.sqrt(max(pre.dt, 1e-9))
    return np.diag(1.0 / sig)


@dataclass(frozen=True)
class PriorFactor:
    mean: VioState
    covariance: np.ndarray  # 15x15 over the state tangent

    def __post_init__(self):
        C = np.asarray(self.covariance, dtype=float)
        if C.shape != (15, 15) or np.any(np.linalg.eigvalsh(0.5 * (C + C.T)) <= 0):
            raise ValueError("prior covariance must be 15x15 positive definite")
        object.__setattr__(self, "covariance", C)

    @classmethod
    def isotropic(cls, mean: VioState, sigma_rot=1e-2, sigma_pos=1e-2, sigma_vel=1e-1, sigma_ba=1e-1, sigma_bg=1e-2):
        s = np.array([sigma_rot] * 3 + [sigma_pos] * 3 + [sigma_vel] * 3 + [sigma_ba] * 3 + [sigma_bg] * 3)
        return cls(mean, np.diag(s**2))

    def sqrt_information(self) -> np.ndarray:
        return np.linalg.cholesky(np.linalg.inv(self.covariance)).T

    def residual(self, s: VioState):
        r = s.local(self.mean)
        J = np.eye(15)
        J[0:3, 0:3] = so3_right_jacobian_inv(r[:3])
        return r, J


# ------------------------------------------------------------ visual terms


def visual_blocks(rig: CameraRig, state: VioState, P, cams, pix):
    """Reprojection residuals ``(F, 2)`` and Jacobians on ``[dtheta, dp]`` ``(F, 2, 6)`` and points."""
    T_bw = state.pose.inverse()
    idx = np.zeros(len(P), dtype=int)
    res, Jl_left, Jpt = reprojection_blocks(rig, [T_bw], idx, P, np.arange(len(P)), cams, pix)
    # left perturbation of T_bw expressed in the right/additive T_wb tangent
    M = np.zeros((6, 6))
    M[0:3, 0:3] = -np.eye(3)
    M[3:6, 3:6] = -state.R.T
    return res, Jl_left @ M, Jpt


def _flatten(pairs):
    P, cams, pix = [], [], []
    for p_w, obs in pairs:
        items = obs.items() if isinstance(obs, dict) else obs
        for k, px in items:
            P.append(np.asarray(p_w, dtype=float))
            cams.append(int(k))
            pix.append(np.asarray(px, dtype=float))
    return np.array(P).reshape(-1, 3), np.array(cams, dtype=int), np.array(pix).reshape(-1, 2)


# ----------------------------------------------------------------- gravity


def excitation(poses: Sequence[RigidTransform], preints: Sequence[PreintegratedImu]) -> float:
    """Trace of the covariance of world-frame mean specific force per interval."""
    f = np.array([T.R @ pre.delta_v / pre.dt for T, pre in zip(poses[:-1], preints)])
    if len(f) < 2:
        return 0.0
    return float(np.trace(np.atleast_2d(np.cov(f.T))))


@dataclass
class GravityResult:
    gravity: GravityEstimate
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    velocities: np.ndarray
    cost: float


def estimate_gravity(
    poses: Sequence[RigidTransform],
    preints: Sequence[PreintegratedImu],
    prior_sigma=(0.1, 0.01),
    min_excitation: float = 1e-2,
    settings: LmSettings = LmSettings(max_iterations=100),
) -> GravityResult:
    """Gravity direction, shared biases and velocities with visual poses held fixed.

    ``poses`` are ``T_wb`` at the keyframes, ``preints[i]`` spans keyframes
    ``i`` and ``i + 1``. ``prior_sigma`` gives the (accel, gyro) bias prior.
    """
    k = len(poses)
    if k < 3 or len(preints) != k - 1:
        raise NotReadyError("gravity estimation needs at least three poses and k-1 preintegrations")
    if excitation(poses, preints) <= min_excitation:
        raise NotReadyError("insufficient accelerometer excitation")

    # initial guess: the velocity terms telescope, so sum(R_i dv_i) ~ g * total time
    acc = sum(T.R @ pre.delta_v for T, pre in zip(poses[:-1], preints))
    grav0 = GravityEstimate.from_direction(acc)
    g0 = grav0.g
    # velocities from the position terms given the guessed gravity
    v0 = np.zeros((k, 3))
    for i, (T, pre) in enumerate(zip(poses[:-1], preints)):
        v0[i] = (poses[i + 1].t - T.t + 0.5 * g0 * pre.dt**2 - T.R @ pre.delta_p) / pre.dt
    last = preints[-1]
    v0[-1] = v0[-2] - g0 * last.dt + poses[-2].R @ last.delta_v

    Lp = np.diag([1 / prior_sigma[0]] * 3 + [1 / prior_sigma[1]] * 3)
    Ls = [pre.sqrt_information() for pre in preints]
    n = 2 + 6 + 3 * k

    def unpack(x):
        grav, b, v = x
        return grav, b[:3], b[3:], v

    def states(x):
        grav, ba, bg, v = unpack(x)
        return [VioState(T, v[i], ba, bg) for i, T in enumerate(poses)]

    def fun(x):
        grav = x[0]
        st = states(x)
        out = [Lp @ x[1]]
        for i, pre in enumerate(preints):
            out.append(Ls[i] @ imu_residual(st[i], st[i + 1], pre, grav).r)
        return np.concatenate(out)

    def jac(x):
        grav = x[0]
        st = states(x)
        rows = [np.zeros((6, n))]
        rows[0][:, 2:8] = Lp
        for i, pre in enumerate(preints):
            res = imu_residual(st[i], st[i + 1], pre, grav)
            Jrow = np.zeros((9, n))
            Jrow[:, 0:2] = res.J_g
            Jrow[:, 2:8] = res.J_i[:, 9:15] + res.J_j[:, 9:15]
            Jrow[:, 8 + 3 * i : 11 + 3 * i] += res.J_i[:, 6:9]
            Jrow[:, 8 + 3 * (i + 1) : 11 + 3 * (i + 1)] += res.J_j[:, 6:9]
            rows.append(Ls[i] @ Jrow)
        return np.vstack(rows)

    def retract(x, d):
        return (x[0].retract(d[0:2]), x[1] + d[2:8], x[2] + d[8:].reshape(k, 3))

    x0 = (grav0, np.zeros(6), v0)
    x, report = levenberg_marquardt(fun, x0, settings, jac=jac, retract=retract)
    grav, ba, bg, v = unpack(x)
    return GravityResult(grav, ba.copy(), bg.copy(), v.copy(), report.cost)


# --------------------------------------------------------- VI pose estimate


@dataclass
class ViPoseResult:
    prev: VioState
    curr: VioState
    cost: float
    initial_cost: float
    report: object


def vi_pose_estimate(
    s_prev: VioState,
    s_curr: VioState | None,
    pre: PreintegratedImu,
    gravity: GravityEstimate,
    rig: CameraRig,
    visual_prev=(),
    visual_curr=(),
    prior: PriorFactor | None = None,
    pixel_noise: NoiseModel | None = None,
    settings: LmSettings = LmSettings(),
    huber: float | None = HUBER_DELTA,
) -> ViPoseResult:
    """Two-state solve over IMU, visual (landmarks fixed) and prior factors.

    ``visual_*`` hold ``(p_w, {camera_index: pixel})`` pairs. ``s_curr=None``
    starts from IMU propagation of ``s_prev``.
    """
    if s_curr is None:
        s_curr = propagate(s_prev, pre, gravity)
    Pp, cp, xp = _flatten(visual_prev)
    Pc, cc, xc = _flatten(visual_curr)
    Lv = np.eye(2) if pixel_noise is None else pixel_noise.sqrt_information(2)
    Li = pre.sqrt_information()
    Lb = bias_walk_sqrt_info(pre)
    Lprior = prior.sqrt_information() if prior is not None else None
    n_vis = 2 * (len(Pp) + len(Pc))

    def fun(x):
        a, b = x
        out = []
        for s, P, c, px in ((a, Pp, cp, xp), (b, Pc, cc, xc)):
            if len(P):
                r, _, _ = visual_blocks(rig, s, P, c, px)
                out.append((r @ Lv.T).ravel())
        out.append(Li @ imu_residual(a, b, pre, gravity).r)
        out.append(Lb @ np.concatenate([b.accel_bias - a.accel_bias, b.gyro_bias - a.gyro_bias]))
        if prior is not None:
            out.append(Lprior @ prior.residual(a)[0])
        return np.concatenate(out)

    def jac(x):
        a, b = x
        rows = []
        for off, (s, P, c, px) in ((0, (a, Pp, cp, xp)), (15, (b, Pc, cc, xc))):
            if len(P):
                _, Jpose, _ = visual_blocks(rig, s, P, c, px)
                Jr = np.zeros((2 * len(P), 30))
                Jr[:, off : off + 6] = np.einsum("ij,fjk->fik", Lv, Jpose).reshape(-1, 6)
                rows.append(Jr)
        res = imu_residual(a, b, pre, gravity)
        rows.append(Li @ np.hstack([res.J_i, res.J_j]))
        Jb = np.zeros((6, 30))
        Jb[:, 9:15] = -np.eye(6)
        Jb[:, 24:30] = np.eye(6)
        rows.append(Lb @ Jb)
        if prior is not None:
            Jp = np.zeros((15, 30))
            Jp[:, :15] = Lprior @ prior.residual(a)[1]
            rows.append(Jp)
        return np.vstack(rows)

    def retract(x, d):
        return (x[0].retract(d[:15]), x[1].retract(d[15:]))

    x, report = levenberg_marquardt(
        fun, (s_prev, s_curr), settings, jac=jac, retract=retract,
        block_size=2, huber_delta=huber if n_vis else None, robust_rows=n_vis,
    )
    if not np.isfinite(report.cost):
        raise NoConvergenceError("VI pose estimation diverged")
    return ViPoseResult(x[0], x[1], report.cost, report.initial_cost, report)


# ------------------------------------------------------------------ VI-SBA


@dataclass
class ViSbaResult:
    states: list
    landmarks: dict
    report: object
    relinearizations: int
    dropped: list


def vi_sba(
    states: Sequence[VioState],
    rig: CameraRig,
    landmarks: dict,
    observations: Sequence[tuple],
    preints: Sequence[PreintegratedImu],
    gravity: GravityEstimate,
    pixel_noise: NoiseModel | None = None,
    settings: LmSettings = LmSettings(),
    huber: float | None = HUBER_DELTA,
    imu_weight: float = 1.0,
    relin_threshold: float = 1e-2,
    relin_every: int = 5,
) -> ViSbaResult:
    """Joint refinement of a window of VI states and landmarks.

    ``observations`` are ``(state_index, landmark_id, camera_index, pixel)``.
    The first pose and first velocity are held. IMU factors are re-targeted
    to the current biases when the bias moved more than ``relin_threshold``
    since the last linearization, or every ``relin_every`` iterations.
    """
    k = len(states)
    if k < 2 or len(preints) != k - 1:
        raise InsufficientDataError("VI-SBA needs at least two states and k-1 preintegrations")
    lm_ids = sorted(landmarks)
    lm_pos = {j: n for n, j in enumerate(lm_ids)}
    obs = [o for o in observations if o[1] in lm_pos]
    sidx = np.array([o[0] for o in obs], dtype=int)
    pidx = np.array([lm_pos[o[1]] for o in obs], dtype=int)
    cidx = np.array([o[2] for o in obs], dtype=int)
    pix = np.array([o[3] for o in obs], dtype=float).reshape(-1, 2)
    Lv = np.eye(2) if pixel_noise is None else pixel_noise.sqrt_information(2)
    nL = len(lm_ids)

    # state columns: first state's pose (0:6) and velocity (6:9) are held
    cols = -np.ones((k, 15), dtype=int)
    c = 0
    for i in range(k):
        for d in range(15):
            if i == 0 and d < 9:
                continue
            cols[i, d] = c
            c += 1
    n_state = c
    dropped = []

    def visual(x):
        st, pts = x
        F = len(obs)
        r = np.empty((F, 2))
        Jc = np.empty((F, 2, 15))
        Jl = np.empty((F, 2, 3))
        for i in range(k):
            sel = sidx == i
            if not sel.any():
                continue
            ri, Jpi, Jli = visual_blocks(rig, st[i], pts[pidx[sel]], cidx[sel], pix[sel])
            r[sel] = ri @ Lv.T
            Jc[sel] = 0.0
            Jc[sel, :, 0:6] = np.einsum("ij,fjk->fik", Lv, Jpi)
            Jl[sel] = np.einsum("ij,fjk->fik", Lv, Jli)
        return r, Jc, Jl

    wimu = np.sqrt(imu_weight)

    def inertial(x, pre_list):
        st, _ = x
        r_rows, J_rows = [], []
        for i, pre in enumerate(pre_list):
            res = imu_residual(st[i], st[i + 1], pre, gravity)
            Li = wimu * pre.sqrt_information()
            Lb = wimu * bias_walk_sqrt_info(pre)
            Jfull = np.zeros((15, 2 * 15))
            Jfull[:9, :15] = res.J_i
            Jfull[:9, 15:] = res.J_j
            Jfull[9:, 9:15] = -np.eye(6)
            Jfull[9:, 24:30] = np.eye(6)
            rb = np.concatenate([st[i + 1].accel_bias - st[i].accel_bias, st[i + 1].gyro_bias - st[i].gyro_bias])
            Lw = np.zeros((15, 15))
            Lw[:9, :9] = Li
            Lw[9:, 9:] = Lb
            r_rows.append(Lw @ np.concatenate([res.r, rb]))
            Jw = Lw @ Jfull
            Jd = np.zeros((15, n_state))
            for blk, s_ in ((0, i), (1, i + 1)):
                m = cols[s_] >= 0
                Jd[:, cols[s_][m]] = Jw[:, 15 * blk : 15 * blk + 15][:, m]
            J_rows.append(Jd)
        return np.concatenate(r_rows), np.vstack(J_rows)

    def retract(x, step):
        st, pts = x
        ds = step[:n_state]
        new = []
        for i in range(k):
            d = np.zeros(15)
            m = cols[i] >= 0
            d[m] = ds[cols[i][m]]
            new.append(st[i].retract(d))
        return new, pts + step[n_state:].reshape(nL, 3)

    pts0 = np.array([landmarks[j] for j in lm_ids], dtype=float).reshape(-1, 3)
    x = (list(states), pts0)
    r0, _, _ = visual(x)
    bad = ~np.all(np.isfinite(r0), axis=1)
    if bad.any():
        bad_lm = np.unique(pidx[bad])
        dropped = [lm_ids[b] for b in bad_lm]
        keep = ~np.isin(pidx, bad_lm)
        obs = [o for o, kk in zip(obs, keep) if kk]
        sidx, pidx, cidx, pix = sidx[keep], pidx[keep], cidx[keep], pix[keep]
    n_vis = 2 * len(obs)

    pre_cur = list(preints)
    relins = 0
    total_it = 0
    report = None
    lin_bias = [np.concatenate([p.accel_bias, p.gyro_bias]) for p in pre_cur]

    while True:
        pre_list = list(pre_cur)

        def fun(x):
            r_vis, _, _ = visual(x)
            r_imu, _ = inertial(x, pre_list)
            return np.concatenate([r_vis.ravel(), r_imu])

        def jac(x):
            return visual(x), inertial(x, pre_list)

        def solve(J, r, sw, lam):
            (_, Jc, Jl), (_, Jd) = J
            w = sw[:n_vis].reshape(-1, 2)[:, :1]
            rv = r[:n_vis].reshape(-1, 2) * w
            return schur_solve(cols, sidx, Jc * w[:, :, None], pidx, Jl * w[:, :, None], rv, n_state, nL, lam,
                               Jd=Jd * sw[n_vis:, None], rd=r[n_vis:] * sw[n_vis:])

        def moved(x):
            st, _ = x
            return any(
                np.linalg.norm(np.concatenate([st[i].accel_bias, st[i].gyro_bias]) - lin_bias[i]) > relin_threshold
                for i in range(k - 1)
            )

        budget = min(relin_every, settings.max_iterations - total_it)
        chunk = replace(settings, max_iterations=max(budget, 1), initial_lambda=report.lam if report else settings.initial_lambda)
        x, rep = levenberg_marquardt(
            fun, x, chunk, jac=jac, retract=retract, solve=solve, block_size=2,
            huber_delta=huber if n_vis else None, robust_rows=n_vis, callback=moved,
        )
        if report is None:
            report = rep
        else:
            report.history.extend(rep.history[1:])
            report.cost, report.reason, report.lam = rep.cost, rep.reason, rep.lam
        total_it += rep.iterations
        if rep.reason in ("zero_cost", "gradient", "step", "cost", "damping") or total_it >= settings.max_iterations:
            if not moved(x):
                break
        if total_it >= settings.max_iterations:
            break
        # re-target every IMU factor to the current bias estimates
        pre_cur = [pre.retarget(x[0][i].accel_bias, x[0][i].gyro_bias, relin_threshold) for i, pre in enumerate(pre_cur)]
        lin_bias = [np.concatenate([p.accel_bias, p.gyro_bias]) for p in pre_cur]
        relins += 1
        report.lam = settings.initial_lambda
    report.iterations = total_it
    st, pts = x
    lms = {j: pts[n].copy() for n, j in enumerate(lm_ids) if j not in dropped}
    return ViSbaResult(list(st), lms, report, relins, dropped)
