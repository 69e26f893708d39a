"""Nonlinear least squares: Levenberg-Marquardt, PnP, Schur-complement bundle
adjustment and the two-view bootstrap (fundamental matrix + RANSAC)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BootstrapFailure,
    InsufficientConstraintsError,
    InvalidProblemError,
    NoConvergenceError,
)
from .geometry import DEPTH_EPS, CameraModel, CameraRig, NoiseModel, RigidTransform, se3_exp, skew_batch

HUBER_DELTA = 1.345
CHI2_2DOF_95 = 5.991


# ------------------------------------------------------------------ LM core


@dataclass(frozen=True)
class LmSettings:
    max_iterations: int = 50
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    cost_tol: float = 1e-16
    max_lambda: float = 1e12

    def __post_init__(self):
        vals = (self.max_iterations, self.initial_lambda, self.gradient_tol, self.step_tol, self.cost_tol, self.max_lambda)
        if any(v <= 0 for v in vals):
            raise ValueError("LM settings must be positive")
        if not self.lambda_up > 1.0 > self.lambda_down > 0.0:
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass
class LmReport:
    iterations: int
    initial_cost: float
    cost: float
    reason: str
    history: list = field(default_factory=list)
    lam: float = 0.0

    @property
    def converged(self) -> bool:
        return self.reason in ("zero_cost", "gradient", "step", "cost")


def robust_weights(r: np.ndarray, block_size: int, delta: float | None, robust_rows: int | None = None):
    """Per-row sqrt IRLS weights and robust cost ``0.5 * sum(rho)`` for Huber.

    Only the first ``robust_rows`` rows are robustified (all when None).
    """
    if delta is None:
        return np.ones_like(r), 0.5 * float(r @ r)
    n = r.size if robust_rows is None else robust_rows
    head, tail = r[:n], r[n:]
    e = np.linalg.norm(head.reshape(-1, block_size), axis=1)
    w = np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))
    rho = np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)
    sw = np.concatenate([np.repeat(np.sqrt(w), block_size), np.ones(tail.size)])
    return sw, 0.5 * float(rho.sum() + tail @ tail)


def _dense_solve(J, r, sw, lam):
    Jw = J * sw[:, None]
    rw = r * sw
    H = Jw.T @ Jw
    g = Jw.T @ rw
    d = np.diag(H).copy()
    d = np.maximum(d, 1e-12 * max(1.0, d.max(initial=0.0)))
    try:
        step = -np.linalg.solve(H + lam * np.diag(d), g)
    except np.linalg.LinAlgError:
        step = -np.linalg.lstsq(H + lam * np.diag(d), g, rcond=None)[0]
    return step, g


def _add(x, delta):
    return x + delta


def levenberg_marquardt(
    fun: Callable,
    x0,
    settings: LmSettings = LmSettings(),
    jac: Callable | None = None,
    retract: Callable = _add,
    solve: Callable = _dense_solve,
    block_size: int = 1,
    huber_delta: float | None = None,
    robust_rows: int | None = None,
    callback: Callable | None = None,
):
    """Minimize ``0.5 * sum(rho(|r_b|^2))`` over blocks of ``fun(x)``.

    ``jac(x)`` returns whatever ``solve(J, r, row_weights, lam)`` understands
    (a dense array for the default solver) and ``solve`` must return the step
    and the gradient. ``retract(x, step)`` applies a step, so manifold states
    only need a suitable retraction. ``callback(x)`` runs after every
    accepted step; a true return value stops with reason "callback".
    Returns ``(x, LmReport)``.
    """
    x = x0
    r = np.asarray(fun(x), dtype=float)
    if r.size == 0:
        raise InvalidProblemError("problem has no residuals")
    if not np.all(np.isfinite(r)):
        raise InvalidProblemError("non-finite residual at the initial point")
    sw, cost = robust_weights(r, block_size, huber_delta, robust_rows)
    report = LmReport(0, cost, cost, "max_iterations", [cost], settings.initial_lambda)
    if cost == 0.0:
        report.reason = "zero_cost"
        return x, report
    lam = settings.initial_lambda
    J = jac(x)
    it = 0
    while it < settings.max_iterations:
        step, g = solve(J, r, sw, lam)
        if np.max(np.abs(g)) < settings.gradient_tol:
            report.reason = "gradient"
            break
        if np.linalg.norm(step) < settings.step_tol:
            report.reason = "step"
            break
        x_new = retract(x, step)
        r_new = np.asarray(fun(x_new), dtype=float)
        new_cost = np.inf
        if np.all(np.isfinite(r_new)):
            sw_new, new_cost = robust_weights(r_new, block_size, huber_delta, robust_rows)
        it += 1
        if new_cost < cost:
            decrease = cost - new_cost
            x, r, sw, cost = x_new, r_new, sw_new, new_cost
            report.history.append(cost)
            lam = max(lam * settings.lambda_down, 1e-15)
            if cost == 0.0:
                report.reason = "zero_cost"
                break
            if decrease <= settings.cost_tol * max(cost, 1e-300) or decrease < 1e-300:
                report.reason = "cost"
                break
            if callback is not None and callback(x):
                report.reason = "callback"
                break
            J = jac(x)
        else:
            lam *= settings.lambda_up
            if lam > settings.max_lambda:
                report.reason = "damping"
                break
    report.iterations = it
    report.cost = cost
    report.lam = lam
    return x, report


# ----------------------------------------------------------- reprojection


@dataclass(frozen=True)
class ReprojectionFactor:
    """``pi(T_cb T_bw p_w) - pixel``; pose perturbed on the left of ``T_bw``."""

    landmark_id: int
    pose_id: int
    camera_index: int
    pixel: tuple
    noise: NoiseModel | None = None

    dim = 2


def reprojection_blocks(rig: CameraRig, T_bw: Sequence[RigidTransform], pose_idx, points, point_idx, cam_idx, pixels):
    """Vectorized residuals ``(F, 2)`` and Jacobians wrt pose ``(F, 2, 6)`` and point ``(F, 2, 3)``.

    Rows whose point lands at or behind a camera get NaN residuals.
    """
    F = len(pose_idx)
    pose_idx = np.asarray(pose_idx, dtype=int)
    cam_idx = np.asarray(cam_idx, dtype=int)
    Rbw = np.array([T.R for T in T_bw]).reshape(-1, 3, 3)
    tbw = np.array([T.t for T in T_bw]).reshape(-1, 3)
    Rk = Rbw[pose_idx]
    pw = points[point_idx]
    pb = np.matmul(Rk, pw[:, :, None])[:, :, 0] + tbw[pose_idx]
    intr = np.array([[c.fx, c.fy, c.cx, c.cy] for c, _ in rig.cameras])[cam_idx]
    Rcb = np.array([T.R for _, T in rig.cameras])[cam_idx]
    tcb = np.array([T.t for _, T in rig.cameras])[cam_idx]
    pc = np.matmul(Rcb, pb[:, :, None])[:, :, 0] + tcb
    fx, fy = intr[:, 0], intr[:, 1]
    z = pc[:, 2]
    ok = z > DEPTH_EPS
    iz = np.where(ok, 1.0 / np.where(ok, z, 1.0), np.nan)
    res = np.column_stack([fx * pc[:, 0] * iz + intr[:, 2], fy * pc[:, 1] * iz + intr[:, 3]]) - pixels
    Jproj = np.zeros((F, 2, 3))
    Jproj[:, 0, 0] = fx * iz
    Jproj[:, 0, 2] = -fx * pc[:, 0] * iz * iz
    Jproj[:, 1, 1] = fy * iz
    Jproj[:, 1, 2] = -fy * pc[:, 1] * iz * iz
    JR = np.matmul(Jproj, Rcb)  # d pixel / d p_b
    Jp = np.empty((F, 2, 6))
    Jp[:, :, :3] = -np.matmul(JR, skew_batch(pb))
    Jp[:, :, 3:] = JR
    Jl = np.matmul(JR, Rk)
    return res, Jp, Jl


def _sqrt_info(noise: NoiseModel | None) -> np.ndarray:
    return np.eye(2) if noise is None else noise.sqrt_information(2)


# ---------------------------------------------------------------------- PnP


@dataclass
class PnpResult:
    pose: RigidTransform
    inliers: np.ndarray
    report: LmReport


def _flatten_pairs(pairs):
    pts, cams, pix, lm = [], [], [], []
    for j, (p_w, observations) in enumerate(pairs):
        items = observations.items() if isinstance(observations, dict) else observations
        for k, px in items:
            pts.append(np.asarray(p_w, dtype=float))
            cams.append(int(k))
            pix.append(np.asarray(px, dtype=float))
            lm.append(j)
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, int), np.zeros((0, 2)), np.zeros(0, int)
    return np.array(pts), np.array(cams), np.array(pix), np.array(lm)


def _check_constraints(points: np.ndarray) -> None:
    uniq = np.unique(np.round(points, 12), axis=0)
    if len(uniq) < 3:
        raise InsufficientConstraintsError(f"{len(uniq)} landmarks, need at least 3")
    s = np.linalg.svd(uniq - uniq.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise InsufficientConstraintsError("landmarks are collinear")


def solve_pnp(
    pairs,
    rig: CameraRig,
    init: RigidTransform,
    noise: NoiseModel | None = None,
    settings: LmSettings = LmSettings(),
    huber: float | None = HUBER_DELTA,
) -> PnpResult:
    """Estimate ``T_bw`` from landmarks and their pixels in any rig cameras.

    ``pairs`` holds ``(p_w, observations)`` with observations given as
    ``{camera_index: pixel}`` or a list of ``(camera_index, pixel)``.
    Residuals are whitened by ``noise`` (1 px isotropic by default) and
    robustified with Huber at ``huber`` whitened units.
    """
    P, cams, pix, _ = _flatten_pairs(pairs)
    if len(P) == 0:
        raise InsufficientConstraintsError("no observations")
    if np.any(cams < 0) or np.any(cams >= len(rig)):
        raise ValueError("camera index outside rig")
    _check_constraints(P)
    L = _sqrt_info(noise)
    idx0 = np.zeros(len(P), dtype=int)

    def residuals(T):
        res, _, _ = reprojection_blocks(rig, [T], idx0, P, np.arange(len(P)), cams, pix)
        return (res @ L.T).ravel()

    def jacobian(T):
        _, Jp, _ = reprojection_blocks(rig, [T], idx0, P, np.arange(len(P)), cams, pix)
        return np.einsum("ij,fjk->fik", L, Jp).reshape(-1, 6)

    # drop factors that start behind their camera; they carry no information
    r0 = residuals(init).reshape(-1, 2)
    front = np.all(np.isfinite(r0), axis=1)
    if front.sum() < len(front):
        P, cams, pix = P[front], cams[front], pix[front]
        idx0 = idx0[front]
        if len(P) == 0:
            raise InsufficientConstraintsError("no landmark in front of the cameras")
        _check_constraints(P)

    T, report = levenberg_marquardt(
        residuals,
        init,
        settings,
        jac=jacobian,
        retract=lambda T, d: se3_exp(d) @ T,
        block_size=2,
        huber_delta=huber,
    )
    r = residuals(T).reshape(-1, 2)
    if not np.all(np.isfinite(r)):
        raise NoConvergenceError("non-finite residuals at the solution")
    inl = np.sum(r * r, axis=1) < CHI2_2DOF_95
    full_inl = np.zeros(len(front), dtype=bool)
    full_inl[np.flatnonzero(front)] = inl
    if inl.sum() < 3:
        raise NoConvergenceError(f"only {inl.sum()} inlier observations after optimization")
    return PnpResult(T, full_inl, report)


# ---------------------------------------------------------------------- SBA


@dataclass
class BAProblem:
    """Flattened bundle-adjustment problem over a map snapshot."""

    rig: CameraRig
    pose_ids: list
    landmark_ids: list
    fixed: np.ndarray  # bool per pose
    pose_idx: np.ndarray
    point_idx: np.ndarray
    cam_idx: np.ndarray
    pixels: np.ndarray
    sqrt_info: np.ndarray  # (F, 2, 2)

    @classmethod
    def from_snapshot(cls, snapshot, fixed=None, noise: NoiseModel | None = None) -> "BAProblem":
        pose_ids = sorted(snapshot.poses)
        lm_ids = sorted(snapshot.landmarks)
        pose_pos = {k: i for i, k in enumerate(pose_ids)}
        lm_pos = {k: i for i, k in enumerate(lm_ids)}
        fixed = snapshot.fixed if fixed is None else fixed
        obs = [o for o in snapshot.observations if o.keyframe_id in pose_pos and o.landmark_id in lm_pos]
        obs.sort(key=lambda o: (o.landmark_id, o.keyframe_id, o.camera_index))
        L0 = _sqrt_info(noise)
        L = np.array([L0 if o.noise is None else _sqrt_info(o.noise) for o in obs]).reshape(-1, 2, 2)
        return cls(
            snapshot.rig,
            pose_ids,
            lm_ids,
            np.array([k in fixed for k in pose_ids], dtype=bool),
            np.array([pose_pos[o.keyframe_id] for o in obs], dtype=int),
            np.array([lm_pos[o.landmark_id] for o in obs], dtype=int),
            np.array([o.camera_index for o in obs], dtype=int),
            np.array([o.pixel for o in obs], dtype=float).reshape(-1, 2),
            L,
        )

    @property
    def free_poses(self) -> np.ndarray:
        return np.flatnonzero(~self.fixed)

    def subset(self, keep: np.ndarray) -> "BAProblem":
        return BAProblem(
            self.rig, self.pose_ids, self.landmark_ids, self.fixed, self.pose_idx[keep], self.point_idx[keep],
            self.cam_idx[keep], self.pixels[keep], self.sqrt_info[keep],
        )

    def linearize(self, state):
        poses, points = state
        res, Jp, Jl = reprojection_blocks(self.rig, poses, self.pose_idx, points, self.point_idx, self.cam_idx, self.pixels)
        L = self.sqrt_info
        return np.matmul(L, res[:, :, None])[:, :, 0], np.matmul(L, Jp), np.matmul(L, Jl)

    def residuals(self, state):
        return self.linearize(state)[0].ravel()

    def retract(self, state, step):
        poses, points = state
        free = self.free_poses
        nP = len(free)
        dp = step[: 6 * nP].reshape(nP, 6)
        dl = step[6 * nP :].reshape(-1, 3)
        new_poses = list(poses)
        for n, i in enumerate(free):
            new_poses[i] = se3_exp(dp[n]) @ poses[i]
        return new_poses, points + dl


def _safe_diag(d):
    return np.maximum(d, 1e-12 * max(1.0, float(np.max(d, initial=0.0))))


def _scatter_add(idx, X, n):
    """``out[idx[f]] += X[f]`` via bincount (much faster than ufunc.at)."""
    shape = X.shape[1:]
    flat = X.reshape(len(X), -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + shape)


def schur_solve(slot_cols, slot, Jc, point_idx, Jl, r, n_state, n_points, lam, Jd=None, rd=None):
    """Damped Gauss-Newton step with landmark blocks eliminated (Schur complement).

    Visual factor ``f`` has residual ``r[f]`` (2), a Jacobian ``Jc[f]`` (2, dc)
    on state slot ``slot[f]`` and ``Jl[f]`` (2, 3) on landmark
    ``point_idx[f]``. ``slot_cols[s]`` lists the state-vector column of each of
    the dc slot parameters, -1 for held parameters. Optional dense rows
    ``Jd`` (m, n_state) with residual ``rd`` touch states only.
    Returns ``(step, gradient)`` over ``[state, landmarks]``.
    """
    slot_cols = np.asarray(slot_cols, dtype=int)
    n_slot, dc = slot_cols.shape
    H = np.zeros((n_state, n_state))
    g = np.zeros(n_state)
    if Jd is not None and len(Jd):
        H += Jd.T @ Jd
        g += Jd.T @ rd
    slot = np.asarray(slot, dtype=int)
    point_idx = np.asarray(point_idx, dtype=int)
    JlT = Jl.transpose(0, 2, 1)
    JcT = Jc.transpose(0, 2, 1)
    V = _scatter_add(point_idx, np.matmul(JlT, Jl), n_points)
    gl = _scatter_add(point_idx, np.matmul(JlT, r[:, :, None])[:, :, 0], n_points)
    U = _scatter_add(slot, np.matmul(JcT, Jc), n_slot)
    gs = _scatter_add(slot, np.matmul(JcT, r[:, :, None])[:, :, 0], n_slot)
    W4 = _scatter_add(slot * n_points + point_idx, np.matmul(JcT, Jl), n_slot * n_points).reshape(n_slot, n_points, dc, 3)
    W = np.zeros((n_state, n_points, 3))
    for s_ in range(n_slot):
        m = slot_cols[s_] >= 0
        cols = slot_cols[s_][m]
        if not len(cols):
            continue
        H[np.ix_(cols, cols)] += U[s_][np.ix_(m, m)]
        g[cols] += gs[s_][m]
        W[cols] += W4[s_][:, m, :].transpose(1, 0, 2)
    W = W.reshape(n_state, 3 * n_points)

    Hd = H + lam * np.diag(_safe_diag(np.diag(H)))
    Vd = V + lam * np.einsum("ij,ni->nij", np.eye(3), _safe_diag(np.einsum("nii->ni", V)))
    # landmarks without factors (dropped from this solve) get a unit block and zero step
    Vd[np.einsum("nii->n", V) == 0.0] = np.eye(3)
    Vinv = np.linalg.inv(Vd)
    WV = np.matmul(W.reshape(n_state, n_points, 3).transpose(1, 0, 2), Vinv).transpose(1, 0, 2).reshape(n_state, 3 * n_points)
    S = Hd - WV @ W.T
    rhs = -(g - WV @ gl.ravel())
    if n_state:
        try:
            ds = np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            ds = np.linalg.lstsq(S, rhs, rcond=None)[0]
    else:
        ds = np.zeros(0)
    dl = -np.matmul(Vinv, (gl + (W.T @ ds).reshape(n_points, 3))[:, :, None])[:, :, 0]
    return np.concatenate([ds, dl.ravel()]), np.concatenate([g, gl.ravel()])


def schur_step(problem: BAProblem, r, Jp, Jl, sw, lam):
    """Schur step for a pose-only bundle adjustment problem.

    ``r, Jp, Jl`` are whitened per-factor blocks; ``sw`` the per-row robust
    weights. Returns ``(step, gradient)`` over ``[free poses, landmarks]``.
    """
    w = sw.reshape(-1, 2)[:, :1]
    free = problem.free_poses
    slot_cols = -np.ones((len(problem.pose_ids), 6), dtype=int)
    slot_cols[free] = 6 * np.arange(len(free))[:, None] + np.arange(6)
    return schur_solve(
        slot_cols, problem.pose_idx, Jp * w[:, :, None], problem.point_idx, Jl * w[:, :, None], r * w,
        6 * len(free), len(problem.landmark_ids), lam,
    )


def dense_normal_jacobian(problem: BAProblem, Jp, Jl) -> np.ndarray:
    """Stacked dense Jacobian ``(2F, 6·free + 3·L)`` from per-factor blocks."""
    free = problem.free_poses
    nP, nL = len(free), len(problem.landmark_ids)
    slot = -np.ones(len(problem.pose_ids), dtype=int)
    slot[free] = np.arange(nP)
    F = len(problem.pose_idx)
    J = np.zeros((2 * F, 6 * nP + 3 * nL))
    for f in range(F):
        s = slot[problem.pose_idx[f]]
        if s >= 0:
            J[2 * f : 2 * f + 2, 6 * s : 6 * s + 6] = Jp[f]
        col = 6 * nP + 3 * problem.point_idx[f]
        J[2 * f : 2 * f + 2, col : col + 3] = Jl[f]
    return J


@dataclass
class SbaResult:
    poses: dict
    landmarks: dict
    report: LmReport
    dropped: list
    initial_rmse: float
    final_rmse: float


def _rmse(problem, state) -> float:
    poses, points = state
    res, _, _ = reprojection_blocks(problem.rig, poses, problem.pose_idx, points, problem.point_idx, problem.cam_idx, problem.pixels)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1)))) if len(res) else 0.0


def sparse_bundle_adjustment(
    snapshot,
    settings: LmSettings = LmSettings(),
    noise: NoiseModel | None = None,
    huber: float | None = HUBER_DELTA,
    fixed=None,
) -> SbaResult:
    """Refine window poses and landmarks of a map snapshot.

    The snapshot is never modified; refined values come back keyed by id.
    Landmarks whose information block is singular, or that sit behind an
    observing camera at the start, are left out and reported in ``dropped``.
    """
    problem = BAProblem.from_snapshot(snapshot, fixed, noise)
    if len(problem.pose_idx) == 0:
        raise InvalidProblemError("bundle adjustment without observations")
    poses = [snapshot.poses[k] for k in problem.pose_ids]
    points = np.array([snapshot.landmarks[k] for k in problem.landmark_ids], dtype=float).reshape(-1, 3)

    r, Jp, Jl = problem.linearize((poses, points))
    bad = np.zeros(len(problem.landmark_ids), dtype=bool)
    bad[problem.point_idx[~np.all(np.isfinite(r), axis=1)]] = True
    good_f = ~bad[problem.point_idx]
    V = np.zeros((len(problem.landmark_ids), 3, 3))
    np.add.at(V, problem.point_idx[good_f], np.einsum("fki,fkj->fij", Jl[good_f], Jl[good_f]))
    ev = np.linalg.eigvalsh(V)
    bad |= ev[:, 0] <= 1e-12 * np.maximum(ev[:, 2], 1e-300)
    dropped = [problem.landmark_ids[i] for i in np.flatnonzero(bad)]
    problem = problem.subset(~bad[problem.point_idx])
    if len(problem.pose_idx) == 0:
        raise InvalidProblemError("no usable landmark left")
    # indices stay stable: dropped landmarks remain in the state with no factors

    def jac(state):
        return problem.linearize(state)

    def solve(J, r_flat, sw, lam):
        _, Jp_b, Jl_b = J
        return schur_step(problem, r_flat.reshape(-1, 2), Jp_b, Jl_b, sw, lam)

    state0 = (poses, points)
    init_rmse = _rmse(problem, state0)
    state, report = levenberg_marquardt(
        problem.residuals,
        state0,
        settings,
        jac=jac,
        retract=problem.retract,
        solve=solve,
        block_size=2,
        huber_delta=huber,
    )
    final_rmse = _rmse(problem, state)
    out_poses = {k: state[0][i] for i, k in enumerate(problem.pose_ids)}
    out_lms = {k: state[1][i].copy() for i, k in enumerate(problem.landmark_ids) if not bad[i]}
    return SbaResult(out_poses, out_lms, report, dropped, init_rmse, final_rmse)


# --------------------------------------------------------------- two-view


def _normalize(x: np.ndarray):
    c = x.mean(axis=0)
    d = np.mean(np.linalg.norm(x - c, axis=1))
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return np.column_stack([x, np.ones(len(x))]) @ T.T, T


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalized 8-point fundamental matrix with ``x2^T F x1 = 0``, rank 2, unit norm."""
    h1, T1 = _normalize(x1)
    h2, T2 = _normalize(x2)
    A = np.einsum("ni,nj->nij", h2, h1).reshape(-1, 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(F)
    F = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def sampson_distance(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = np.sum(h2 * Fx1, axis=1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def estimate_fundamental_ransac(x1, x2, iterations: int = 500, threshold: float = 1.0, seed: int | None = 0):
    """RANSAC over 8-point samples; returns ``(F, inlier_mask)``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = len(x1)
    if n < 8 or len(x2) != n:
        raise BootstrapFailure(f"{n} matches, need at least 8")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    for _ in range(iterations):
        sample = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(x1[sample], x2[sample])
        except np.linalg.LinAlgError:
            continue
        mask = sampson_distance(F, x1, x2) < threshold
        c = int(mask.sum())
        if c > best_count:
            best_count, best_mask = c, mask
            if c == n:
                break
    if best_mask is None or best_count < 8:
        raise BootstrapFailure("no fundamental matrix with 8 inliers")
    # refit on the consensus set, then refresh the mask once
    F = eight_point(x1[best_mask], x2[best_mask])
    mask = sampson_distance(F, x1, x2) < threshold
    if mask.sum() < 8:
        raise BootstrapFailure("refit lost the consensus set")
    F = eight_point(x1[mask], x2[mask])
    mask = sampson_distance(F, x1, x2) < threshold
    return F, mask


def _bearings(cam: CameraModel, x: np.ndarray) -> np.ndarray:
    b = np.column_stack([(x[:, 0] - cam.cx) / cam.fx, (x[:, 1] - cam.cy) / cam.fy, np.ones(len(x))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _depths(R, t, f1, f2):
    """Depth of each match along ``f1`` (camera 1) and ``f2`` (camera 2) via midpoint."""
    # solve a*R f1 - b*f2 = -t in least squares, per match
    A1 = f1 @ R.T
    d = np.einsum("ni,ni->n", A1, f2)
    e1 = -A1 @ t
    e2 = -f2 @ t
    den = 1.0 - d * d
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (e1 - d * e2) / den
        b = (d * e1 - e2) / den
    return a, b


def pose_from_fundamental(F, cam: CameraModel, x1, x2, mask=None, min_parallax_deg: float = 0.5) -> RigidTransform:
    """Relative pose ``T_21`` (camera 2 from camera 1) with unit translation."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if mask is not None:
        x1, x2 = x1[mask], x2[mask]
    if len(x1) < 8:
        raise BootstrapFailure("too few matches for pose recovery")
    f1 = _bearings(cam, x1)
    f2 = _bearings(cam, x2)
    # a rotation alone explaining every match means there is no baseline
    M = f2.T @ f1
    U, _, Vt = np.linalg.svd(M)
    Rrot = U @ np.diag([1, 1, np.linalg.det(U @ Vt)]) @ Vt
    ang = np.degrees(np.arccos(np.clip(np.sum((f1 @ Rrot.T) * f2, axis=1), -1, 1)))
    if np.median(ang) < min_parallax_deg * 0.5:
        raise BootstrapFailure("matches are explained by a pure rotation; baseline too small")

    K = cam.K
    E = K.T @ np.asarray(F) @ K
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Wm = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    t = U[:, 2]
    if np.linalg.norm(t) < 1e-12:
        raise BootstrapFailure("near-zero translation")
    candidates = []
    for R in (U @ Wm @ Vt, U @ Wm.T @ Vt):
        for s in (1.0, -1.0):
            a, b = _depths(R, s * t, f1, f2)
            good = int(np.sum((a > 0) & (b > 0) & np.isfinite(a) & np.isfinite(b)))
            candidates.append((good, R, s * t))
    candidates.sort(key=lambda c: -c[0])
    if candidates[0][0] == 0 or candidates[0][0] == candidates[1][0]:
        raise BootstrapFailure("cheirality vote is inconclusive")
    _, R, t = candidates[0]
    t = t / np.linalg.norm(t)
    return RigidTransform.from_matrix(R, t)
