"""Trajectory error metrics: APE with closed-form alignment and relative pose errors."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InsufficientDataError
from ..geometry import RigidTransform
from ..trajectory import TrajectoryEstimate

ASSOCIATION_TOLERANCE = 0.01  # s
KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
KITTI_STEP = 10
ALIGNMENTS = {"none": "none", "rigid": "rigid", "sim": "sim", "rigid+scale": "sim"}
SCHEMES = ("whole", "kitti", "rpe1s", "frame")


def associate(t_gt, t_est, tolerance: float = ASSOCIATION_TOLERANCE):
    """Index pairs matching each gt stamp to its nearest estimate, both ways unique."""
    t_gt = np.asarray(t_gt, dtype=float)
    t_est = np.asarray(t_est, dtype=float)
    if not len(t_gt) or not len(t_est):
        return np.zeros((0, 2), dtype=int)
    order = np.argsort(t_est)
    ts = t_est[order]
    k = np.clip(np.searchsorted(ts, t_gt), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_gt), int)
    if len(ts) > 1:
        left = np.abs(t_gt - ts[k - 1]) <= np.abs(t_gt - ts[k])
        k = np.where(left, k - 1, k)
    d = np.abs(t_gt - ts[k])
    pairs, used = [], set()
    for i in np.argsort(d, kind="stable"):
        if d[i] > tolerance or k[i] in used:
            continue
        used.add(k[i])
        pairs.append((i, order[k[i]]))
    pairs.sort()
    return np.array(pairs, dtype=int).reshape(-1, 2)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """(s, R, t) minimizing sum |dst - (s R src + t)|^2."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    n = len(src)
    C = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var = (xs ** 2).sum() / n
    s = float(np.trace(np.diag(D) @ S) / var) if with_scale and var > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


@dataclass
class MetricsReport:
    scheme: str
    align: str
    rmse_ape: float
    avg_rte: float  # percent (whole, kitti) or meters (rpe1s, frame)
    avg_re: float  # degrees (deg/m for kitti)
    associated: int
    unassociated: int
    scale: float = 1.0
    pairs: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _matched(gt: TrajectoryEstimate, est: TrajectoryEstimate, tolerance=ASSOCIATION_TOLERANCE):
    idx = associate(gt.timestamps, est.timestamps, tolerance)
    if len(idx) < 2:
        raise InsufficientDataError(f"{len(idx)} associated poses, need at least 2")
    G = [gt.poses[i].inverse() for i in idx[:, 0]]  # T_wb
    E = [est.poses[j].inverse() for j in idx[:, 1]]
    ts = np.array([gt.timestamps[i] for i in idx[:, 0]])
    return ts, G, E, len(gt) - len(idx)


def _align(G, E, align: str):
    mode = ALIGNMENTS.get(align)
    if mode is None:
        raise ValueError(f"unknown alignment {align!r}")
    if mode == "none":
        return 1.0, np.eye(3), np.zeros(3)
    P = np.array([T.t for T in E])
    Q = np.array([T.t for T in G])
    return umeyama(P, Q, mode == "sim")


def ape_errors(gt: TrajectoryEstimate, est: TrajectoryEstimate, align: str = "rigid") -> np.ndarray:
    """Per-pose translational errors after alignment."""
    _, G, E, _ = _matched(gt, est)
    s, R, t = _align(G, E, align)
    P = np.array([T.t for T in E])
    Q = np.array([T.t for T in G])
    return np.linalg.norm(Q - (s * P @ R.T + t), axis=1)


def compute_ape(gt: TrajectoryEstimate, est: TrajectoryEstimate, align: str = "rigid") -> float:
    e = ape_errors(gt, est, align)
    return float(np.sqrt(np.mean(e ** 2)))


def _scaled(E, s):
    return [RigidTransform(T.rotation, s * T.t) for T in E]


def relative_error(Gi, Gj, Ei, Ej):
    """(translation norm, rotation angle rad) of (gt_i^-1 gt_j)^-1 (est_i^-1 est_j)."""
    D = (Gi.inverse() @ Gj).inverse() @ (Ei.inverse() @ Ej)
    return float(np.linalg.norm(D.t)), D.angle()


def _path_lengths(G) -> np.ndarray:
    p = np.array([T.t for T in G])
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def _kitti(G, E, lengths, step):
    dist = _path_lengths(G)
    t_err, r_err, per_len = [], [], {}
    for i in range(0, len(G), step):
        for L in lengths:
            j = int(np.searchsorted(dist, dist[i] + L))
            if j >= len(G):
                continue  # segment runs past the end
            te, re = relative_error(G[i], G[j], E[i], E[j])
            t_err.append(te / L)
            r_err.append(re / L)
            per_len.setdefault(L, []).append((te / L, re / L))
    if not t_err:
        return np.nan, np.nan, {}, 0
    seg = {str(L): {"translation_pct": 100 * float(np.mean([a for a, _ in v])),
                    "rotation_deg_per_m": float(np.degrees(np.mean([b for _, b in v])))} for L, v in per_len.items()}
    return 100 * float(np.mean(t_err)), float(np.degrees(np.mean(r_err))), seg, len(t_err)


def compute_relative_errors(gt: TrajectoryEstimate, est: TrajectoryEstimate, scheme: str = "whole", align: str = "rigid",
                            lengths=KITTI_LENGTHS, step: int = KITTI_STEP, delta: float = 1.0) -> MetricsReport:
    """Relative pose errors under one of the evaluation schemes.

    whole  single segment first to last pose; avgRTE in percent of path length, avgRE in degrees.
    kitti  segments of ``lengths`` metres every ``step`` poses; percent and deg/m.
    rpe1s  pairs ``delta`` seconds apart; RMSE in metres and degrees.
    frame  consecutive pairs; mean metres and degrees per frame.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    ts, G, E, missed = _matched(gt, est)
    s, R, t = _align(G, E, align)
    ape = ape_errors(gt, est, align)
    Es = _scaled(E, s) if ALIGNMENTS[align] == "sim" else E
    extra = {}
    if scheme == "whole":
        L = _path_lengths(G)[-1]
        te, re = relative_error(G[0], G[-1], Es[0], Es[-1])
        rte = 100 * te / L if L > 0 else np.nan
        rre = float(np.degrees(re))
        n = 1
    elif scheme == "kitti":
        rte, rre, extra, n = _kitti(G, Es, lengths, step)
    elif scheme == "rpe1s":
        te, re = [], []
        for i in range(len(G)):
            j = int(np.searchsorted(ts, ts[i] + delta - 1e-9))
            if j >= len(G):
                break
            a, b = relative_error(G[i], G[j], Es[i], Es[j])
            te.append(a)
            re.append(b)
        n = len(te)
        rte = float(np.sqrt(np.mean(np.square(te)))) if te else np.nan
        rre = float(np.degrees(np.sqrt(np.mean(np.square(re))))) if re else np.nan
    else:
        pairs = [relative_error(G[i], G[i + 1], Es[i], Es[i + 1]) for i in range(len(G) - 1)]
        n = len(pairs)
        rte = float(np.mean([a for a, _ in pairs]))
        rre = float(np.degrees(np.mean([b for _, b in pairs])))
        extra = {"t_rel": rte, "r_rel": rre}
    return MetricsReport(scheme, ALIGNMENTS[align], float(np.sqrt(np.mean(ape ** 2))), float(rte), float(rre),
                         len(G), missed, float(s), n, extra)
