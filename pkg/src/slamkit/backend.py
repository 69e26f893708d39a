"""Global map, metric loop closing and pose-graph optimization.

Map poses are T_wb (body to map). A landmark is stored in the body frame of
the first keyframe that reported it, so pose-graph corrections carry every
landmark along with its anchor.
"""

from __future__ import annotations

import logging
import queue
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateGeometryError,
    DisconnectedGraphError,
    DuplicateIdError,
    InsufficientConstraintsError,
    LogSingularityError,
    NoConvergenceError,
    OutOfOrderError,
)
from .geometry import DEPTH_EPS, CameraRig, RigidTransform, adjoint, se3_exp, se3_log, se3_right_jacobian_inv
from .localmap import MapSnapshot, Observation
from .solvers import BAProblem, LmReport, LmSettings, levenberg_marquardt, reprojection_blocks, solve_pnp, sparse_bundle_adjustment

log = logging.getLogger(__name__)

LOOP_RADIUS = 5.0
TEMPORAL_EXCLUSION = 3
MIN_LOOP_LANDMARKS = 8
MAX_LOOP_RMSE = 2.0
MAX_LOOP_SIGMA_T = 0.02  # m, marginal translation sigma of a refined loop pose
LOOP_VARIANCE_SCALE = 4.0


@dataclass(frozen=True)
class PoseGraphEdge:
    i: int
    j: int
    delta: RigidTransform  # D_ij ~ T_i^-1 T_j
    sqrt_info: np.ndarray = field(default_factory=lambda: np.eye(6))
    kind: str = "odometry"

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("pose-graph edge must join two different nodes")
        if np.shape(self.sqrt_info) != (6, 6):
            raise ValueError("edge information must be 6x6")


@dataclass
class MapKeyframe:
    id: int
    timestamp: float
    pose: RigidTransform  # T_wb in the map (PGO-corrected)
    odom_pose: RigidTransform  # T_wb as reported by the frontend
    observations: list = field(default_factory=list)  # (landmark_id, camera_index, pixel)
    features: dict = field(default_factory=dict)  # (landmark_id, camera_index) -> descriptor


@dataclass
class MapLandmark:
    id: int
    anchor: int  # keyframe id
    position: np.ndarray  # in the anchor's body frame


class GlobalMap:
    def __init__(self):
        self.keyframes: "OrderedDict[int, MapKeyframe]" = OrderedDict()
        self.landmarks: dict[int, MapLandmark] = {}
        self.edges: list[PoseGraphEdge] = []
        self._tree = None
        self._tree_ids = None

    def __len__(self) -> int:
        return len(self.keyframes)

    def landmark_position(self, lm_id: int) -> np.ndarray:
        lm = self.landmarks[lm_id]
        return self.keyframes[lm.anchor].pose.apply(lm.position)

    def poses(self) -> dict:
        return {k: kf.pose for k, kf in self.keyframes.items()}

    def set_poses(self, poses: dict) -> None:
        for k, T in poses.items():
            self.keyframes[k].pose = T
        self._tree = None

    def integrate(self, kf_id: int, timestamp: float, T_wb: RigidTransform, delta: RigidTransform | None = None,
                  landmarks: dict | None = None, observations=(), features=None) -> MapKeyframe:
        """Append one keyframe; an odometry edge (prev -> new) carries ``delta``."""
        if kf_id in self.keyframes:
            raise DuplicateIdError(f"keyframe {kf_id} already in the global map")
        if self.keyframes and kf_id <= next(reversed(self.keyframes)):
            raise OutOfOrderError(f"keyframe {kf_id} arrives after {next(reversed(self.keyframes))}")
        prev = self.keyframes[next(reversed(self.keyframes))] if self.keyframes else None
        if prev is None:
            pose = T_wb
        else:
            delta = delta if delta is not None else prev.odom_pose.inverse() @ T_wb
            pose = prev.pose @ delta
        kf = MapKeyframe(kf_id, timestamp, pose, T_wb, list(observations), dict(features or {}))
        self.keyframes[kf_id] = kf
        if prev is not None:
            self.edges.append(PoseGraphEdge(prev.id, kf_id, delta))
        inv = T_wb.inverse()
        for lm_id, p_w in (landmarks or {}).items():
            p_w = np.asarray(p_w, dtype=float)
            if lm_id not in self.landmarks:
                self.landmarks[lm_id] = MapLandmark(lm_id, kf_id, inv.apply(p_w))
            else:
                # re-observed: the frontend estimate is refined, keep it relative to the anchor's odometry pose
                lm = self.landmarks[lm_id]
                anchor = self.keyframes[lm.anchor].odom_pose
                self.landmarks[lm_id] = MapLandmark(lm_id, lm.anchor, anchor.inverse().apply(p_w))
        self._tree = None
        return kf

    def add_edge(self, edge: PoseGraphEdge) -> None:
        if edge.i not in self.keyframes or edge.j not in self.keyframes:
            raise KeyError("edge endpoints must be keyframes in the map")
        self.edges.append(edge)

    def check_invariants(self) -> None:
        ids = list(self.keyframes)
        assert ids == sorted(ids)
        odo = {(e.i, e.j) for e in self.edges if e.kind == "odometry"}
        for a, b in zip(ids, ids[1:]):
            assert (a, b) in odo
        for e in self.edges:
            assert e.i in self.keyframes and e.j in self.keyframes
        for lm in self.landmarks.values():
            assert lm.anchor in self.keyframes

    # ------------------------------------------------------------ search

    def _positions(self):
        ids = np.array(list(self.keyframes), dtype=int)
        P = np.array([kf.pose.t for kf in self.keyframes.values()]).reshape(-1, 3)
        return ids, P

    def query_nearby_poses(self, center, radius: float) -> list:
        """Keyframe ids whose map position lies within ``radius`` (inclusive), ascending."""
        if not self.keyframes:
            return []
        if self._tree is None:
            self._tree_ids, P = self._positions()
            self._tree = (cKDTree(P), P)
        tree, P = self._tree
        c = np.asarray(center, dtype=float)
        # the tree proposes, one exact distance test decides (boundary ties match a linear scan)
        cand = np.asarray(tree.query_ball_point(c, radius * (1 + 1e-9) + 1e-12), dtype=int)
        if cand.size == 0:
            return []
        d2 = np.sum((P[cand] - c) ** 2, axis=1)
        keep = cand[d2 <= radius * radius]
        return sorted(int(i) for i in self._tree_ids[keep])

    # -------------------------------------------------------------- dump

    def dumps(self) -> str:
        lines = []
        for k, kf in self.keyframes.items():
            v = kf.pose.to_tum() + 0.0  # no negative zeros in text
            lines.append(f"node {k} {kf.timestamp:.9f} " + " ".join(f"{x:.9g}" for x in v))
        for e in self.edges:
            v = e.delta.to_tum() + 0.0
            lines.append(f"edge {e.i} {e.j} " + " ".join(f"{x:.9g}" for x in v) + f" {e.kind}")
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())


def integrate_keyframe(gmap: GlobalMap, payload) -> GlobalMap:
    """Append a frontend KeyframePayload (pose given as T_bw)."""
    gmap.integrate(payload.keyframe_id, payload.timestamp, payload.pose.inverse(),
                   None if len(gmap) == 0 else payload.delta,
                   payload.landmarks, payload.observations, payload.features)
    return gmap


def query_nearby_poses(gmap: GlobalMap, center, radius: float) -> list:
    return gmap.query_nearby_poses(center, radius)


# ------------------------------------------------------------ loop closing


@dataclass
class LoopCandidate:
    keyframe_id: int
    landmark_ids: list
    matches: list  # (camera_index, pixel) per landmark
    positions: np.ndarray  # map frame


def select_loop_landmarks(gmap: GlobalMap, candidates, views, pose_guess: RigidTransform, rig: CameraRig, frontend,
                          margin: float = 5.0) -> LoopCandidate | None:
    """Largest per-keyframe set of landmarks that are visible and re-found in ``views``.

    ``pose_guess`` is T_bw in the map frame. None when nothing verifies.
    """
    best = None
    for c in sorted(candidates):
        kf = gmap.keyframes[c]
        # one entry per landmark; a stereo observation lists it once per camera
        feats: dict[int, dict] = {}
        for lm_id, cam, _ in kf.observations:
            if lm_id in gmap.landmarks and (lm_id, cam) in kf.features:
                feats.setdefault(lm_id, {})[cam] = kf.features[(lm_id, cam)]
        if not feats:
            continue
        lms = list(feats)
        P = np.array([gmap.landmark_position(l) for l in lms])
        found = {}
        for k in range(len(rig)):
            cam = rig.camera(k)
            Q = rig.camera_from_world(k, pose_guess).apply(P)
            front = Q[:, 2] > DEPTH_EPS
            z = np.where(front, Q[:, 2], 1.0)
            uv = np.column_stack([cam.fx * Q[:, 0] / z + cam.cx, cam.fy * Q[:, 1] / z + cam.cy])
            vis = np.flatnonzero(front & cam.in_bounds(uv, margin))
            vis = [i for i in vis if i not in found]
            if not vis:
                continue
            # prefer the descriptor taken by the same camera
            desc = [feats[lms[i]].get(k, next(iter(feats[lms[i]].values()))) for i in vis]
            got = frontend.match(views[k], desc, uv[vis])
            for i, px in zip(vis, got):
                if px is not None:
                    found[i] = (k, tuple(float(v) for v in px))
        if not found:
            continue
        idx = sorted(found)
        cand = LoopCandidate(c, [lms[i] for i in idx], [found[i] for i in idx], P[idx])
        if best is None or len(cand.landmark_ids) > len(best.landmark_ids):
            best = cand
    return best


@dataclass
class LoopEstimate:
    pose: RigidTransform  # T_bm
    inliers: np.ndarray
    rmse: float
    accepted: bool


def estimate_loop_delta(positions, matches, rig: CameraRig, init: RigidTransform, settings: LmSettings = LmSettings(),
                        huber: float = 1.345, min_inliers: int = MIN_LOOP_LANDMARKS, max_rmse: float = MAX_LOOP_RMSE) -> LoopEstimate | None:
    """Huber LM for T_bm from map landmarks and their current pixels, then a refit on inliers.

    Returns None below the landmark floor; otherwise the estimate with its
    acceptance flag (inlier count and inlier RMSE).
    """
    if len(positions) < min_inliers:
        return None
    pairs = [(p, {k: px}) for p, (k, px) in zip(positions, matches)]
    try:
        res = solve_pnp(pairs, rig, init, None, settings, huber)
        inl = res.inliers
        if inl.sum() >= 3 and not inl.all():
            sub = [pr for pr, ok in zip(pairs, inl) if ok]
            res2 = solve_pnp(sub, rig, res.pose, None, settings, huber)
            T = res2.pose
        else:
            T = res.pose
    except (InsufficientConstraintsError, NoConvergenceError) as exc:
        log.info("loop pose rejected: %s", exc)
        return None
    P = np.asarray(positions, dtype=float)
    cams = np.array([k for k, _ in matches])
    pix = np.array([px for _, px in matches], dtype=float)
    r, _, _ = reprojection_blocks(rig, [T], np.zeros(len(P), int), P, np.arange(len(P)), cams, pix)
    e2 = np.sum(r * r, axis=1)
    e2 = np.where(np.isfinite(e2), e2, np.inf)
    inl = e2 < 5.991
    rmse = float(np.sqrt(np.mean(e2[inl]))) if inl.any() else np.inf
    ok = bool(inl.sum() >= min_inliers and rmse < max_rmse)
    return LoopEstimate(T, inl, rmse, ok)


def refine_loop_pose(gmap: GlobalMap, sel: LoopCandidate, est: LoopEstimate, views, rig: CameraRig, frontend,
                     settings: LmSettings = LmSettings(max_iterations=20), huber: float = 1.345):
    """Two-keyframe bundle adjustment of the loop pose (T_bm).

    Returns the refined pose and its marginal covariance (None when the
    refinement did not run).

    Map landmarks carry the depth error of their original triangulation; the
    PnP fit cannot separate it from a rotation/translation trade-off. Here
    the candidate keyframe stays fixed, the inlier landmarks are freed, and
    both keyframes' observations in every camera constrain them.
    """
    # every matched landmark takes part: PnP outliers are mostly depth errors that the freed landmarks absorb
    ids = list(sel.landmark_ids)
    P = dict(zip(ids, sel.positions))
    kf = gmap.keyframes[sel.keyframe_id]
    cur = -1  # the querying keyframe is not in the map's id space here
    obs = [Observation(l, kf.id, k, tuple(px)) for l, k, px in kf.observations if l in P]
    feats = {(l, k): f for (l, k), f in kf.features.items() if l in P}
    Pm = np.array([P[l] for l in ids]).reshape(-1, 3)
    for k in range(len(rig)):
        cam = rig.camera(k)
        fk = [(i, feats.get((l, k))) for i, l in enumerate(ids)]
        fk = [(i, f) for i, f in fk if f is not None]
        if not fk:
            continue
        idx = np.array([i for i, _ in fk])
        Q = rig.camera_from_world(k, est.pose).apply(Pm[idx])
        front = Q[:, 2] > DEPTH_EPS
        z = np.where(front, Q[:, 2], 1.0)
        uv = np.column_stack([cam.fx * Q[:, 0] / z + cam.cx, cam.fy * Q[:, 1] / z + cam.cy])
        got = frontend.match(views[k], [f for _, f in fk], uv)
        obs += [Observation(ids[i], cur, k, tuple(float(v) for v in px)) for i, px, ok in zip(idx, got, front)
                if px is not None and ok]
    snap = MapSnapshot(rig, {kf.id: kf.pose.inverse(), cur: est.pose}, dict(P), tuple(obs), frozenset([kf.id]))
    try:
        res = sparse_bundle_adjustment(snap, settings, huber=huber)
    except (InsufficientConstraintsError, NoConvergenceError, DegenerateGeometryError) as exc:
        log.info("loop refinement skipped: %s", exc)
        return est.pose, None
    if cur not in res.poses:
        return est.pose, None
    return res.poses[cur], _pose_marginal(snap, res, cur, huber)


def _pose_marginal(snap: MapSnapshot, res, pose_id, huber) -> np.ndarray | None:
    """6x6 covariance of one free pose with the landmarks eliminated (unit pixel noise)."""
    problem = BAProblem.from_snapshot(MapSnapshot(snap.rig, res.poses, res.landmarks, snap.observations, snap.fixed))
    poses = [res.poses[k] for k in problem.pose_ids]
    points = np.array([res.landmarks[k] for k in problem.landmark_ids]).reshape(-1, 3)
    r, Jp, Jl = problem.linearize((poses, points))
    ok = np.all(np.isfinite(r), axis=1)
    e = np.linalg.norm(r, axis=1)
    w = np.where(ok, np.minimum(1.0, huber / np.maximum(np.where(ok, e, 1.0), 1e-12)), 0.0)
    Jp, Jl = np.where(ok[:, None, None], Jp, 0.0), np.where(ok[:, None, None], Jl, 0.0)
    on = (problem.pose_idx == problem.pose_ids.index(pose_id))[:, None, None]
    Jp = np.where(on, Jp, 0.0)
    n = len(problem.landmark_ids)
    Hpp = np.einsum("f,fki,fkj->ij", w, Jp, Jp)
    Hpl = _scatter(problem.point_idx, np.einsum("f,fki,fkj->fij", w, Jp, Jl), n)
    Hll = _scatter(problem.point_idx, np.einsum("f,fki,fkj->fij", w, Jl, Jl), n)
    S = Hpp.copy()
    for i in range(n):
        if np.linalg.cond(Hll[i]) < 1e12:
            S -= Hpl[i] @ np.linalg.solve(Hll[i], Hpl[i].T)
    # variance factor from the residuals, so the result is in metres whatever the image noise
    dof = 2 * int(ok.sum()) - 6 - 3 * n
    s2 = float(np.sum(w[ok] * e[ok] ** 2)) / dof if dof > 0 else 1.0
    try:
        return np.linalg.inv(S) * s2
    except np.linalg.LinAlgError:
        return None


def _scatter(idx, X, n):
    out = np.zeros((n,) + X.shape[1:])
    np.add.at(out, idx, X)
    return out


# ------------------------------------------------------------- pose graph


@dataclass
class PgoResult:
    poses: dict
    report: LmReport
    initial_cost: float
    cost: float


def edge_residual(Ti: RigidTransform, Tj: RigidTransform, D: RigidTransform):
    """``Log(D^-1 T_i^-1 T_j)`` with Jacobians for left perturbations of T_i and T_j."""
    E = D.inverse() @ Ti.inverse() @ Tj
    r = se3_log(E)
    A = se3_right_jacobian_inv(r) @ adjoint(Tj.inverse())
    return r, -A, A


def _batch_skew(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _batch_edges(Ri, ti, Rj, tj, DRt, Dt):
    """Residuals Log(D^-1 T_i^-1 T_j) and A = Jr^-1(r) Ad(T_j^-1) for all edges at once."""
    ER = DRt @ np.transpose(Ri, (0, 2, 1)) @ Rj
    Et = np.einsum("eij,ej->ei", DRt, np.einsum("eji,ej->ei", Ri, tj - ti) - Dt)
    w = Rotation.from_matrix(ER).as_rotvec()
    th = np.linalg.norm(w, axis=1)
    if np.any(th >= np.pi - 1e-6):
        raise LogSingularityError("pose graph edge rotation too close to pi")
    W = _batch_skew(w)
    WW = W @ W
    small = th < 1e-5
    ths = np.where(small, 1.0, th)
    c = np.where(small, 1.0 / 12.0, 1.0 / ths**2 - (1 + np.cos(ths)) / (2 * ths * np.sin(ths)))
    eye = np.eye(3)
    Vinv = eye - 0.5 * W + c[:, None, None] * WW
    v = np.einsum("eij,ej->ei", Vinv, Et)
    r = np.concatenate([w, v], axis=1)
    # right Jacobian of SE(3) at r is the left Jacobian at -r
    Wn, Vn = -W, _batch_skew(-v)
    a = np.where(small, 0.5, (1 - np.cos(ths)) / ths**2)
    b = np.where(small, 1.0 / 6.0, (ths - np.sin(ths)) / ths**3)
    Jw = eye + a[:, None, None] * Wn + b[:, None, None] * (Wn @ Wn)
    sm4 = th < 1e-4
    t4 = np.where(sm4, 1.0, th)
    s4, c4 = np.sin(t4), np.cos(t4)
    c1 = np.where(sm4, 1.0 / 6.0, (t4 - s4) / t4**3)[:, None, None]
    c2 = np.where(sm4, 1.0 / 24.0, (t4**2 + 2 * c4 - 2) / (2 * t4**4))[:, None, None]
    c3 = np.where(sm4, 1.0 / 120.0, (2 * t4 - 3 * s4 + t4 * c4) / (2 * t4**5))[:, None, None]
    WV, VW = Wn @ Vn, Vn @ Wn
    WVW = WV @ Wn
    Q = 0.5 * Vn + c1 * (WV + VW + WVW) + c2 * ((Wn @ Wn) @ Vn + VW @ Wn - 3 * WVW) + c3 * (WVW @ Wn + Wn @ WVW)
    Jr = np.zeros((len(w), 6, 6))
    Jr[:, :3, :3] = Jw
    Jr[:, 3:, 3:] = Jw
    Jr[:, 3:, :3] = Q
    # Ad(T_j^-1): rotation R_j^T, translation -R_j^T t_j
    RjT = np.transpose(Rj, (0, 2, 1))
    Ad = np.zeros((len(w), 6, 6))
    Ad[:, :3, :3] = RjT
    Ad[:, 3:, 3:] = RjT
    Ad[:, 3:, :3] = _batch_skew(-np.einsum("eij,ej->ei", RjT, tj)) @ RjT
    return r, np.linalg.solve(Jr, Ad)


def _components(ids, edges):
    parent = {k: k for k in ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        ra, rb = find(e.i), find(e.j)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps = {}
    for k in ids:
        comps.setdefault(find(k), []).append(k)
    return sorted(comps.values())


def optimize_pose_graph(nodes: dict, edges, fixed=None, settings: LmSettings = LmSettings(max_iterations=100)) -> PgoResult:
    """Minimize ``sum |L_e Log(D_ij^-1 T_i^-1 T_j)|^2`` over node poses T_wb.

    The first node (smallest id) is held unless ``fixed`` names others.
    """
    ids = sorted(nodes)
    if not ids:
        raise ValueError("empty pose graph")
    for e in edges:
        if e.i not in nodes or e.j not in nodes:
            raise KeyError(f"edge {e.i}->{e.j} references an unknown node")
    comps = _components(ids, edges)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    fixed = {ids[0]} if fixed is None else set(fixed)
    free = [k for k in ids if k not in fixed]
    col = {k: 6 * n for n, k in enumerate(free)}
    index = {k: n for n, k in enumerate(ids)}
    edges = list(edges)
    if not edges or not free:
        return PgoResult(dict(nodes), LmReport(0, 0.0, 0.0, "zero_cost", [0.0], 0.0), 0.0, 0.0)

    I = np.array([index[e.i] for e in edges])
    Jx = np.array([index[e.j] for e in edges])
    DRt = np.array([e.delta.R.T for e in edges])
    Dt = np.array([e.delta.t for e in edges])
    Ls = np.array([e.sqrt_info for e in edges])
    ci = np.array([col.get(e.i, -1) for e in edges])
    cj = np.array([col.get(e.j, -1) for e in edges])
    cache = {}

    def linear(x):
        if cache.get("x") is not x:
            R = np.array([T.R for T in x])
            t = np.array([T.t for T in x])
            r, A = _batch_edges(R[I], t[I], R[Jx], t[Jx], DRt, Dt)
            cache.update(x=x, r=r, A=A)
        return cache["r"], cache["A"]

    def fun(x):
        r, _ = linear(x)
        return np.einsum("eij,ej->ei", Ls, r).ravel()

    def jac(x):
        _, A = linear(x)
        LA = Ls @ A
        J = np.zeros((6 * len(edges), 6 * len(free)))
        rows = 6 * np.arange(len(edges))
        for n in range(len(edges)):
            if ci[n] >= 0:
                J[rows[n] : rows[n] + 6, ci[n] : ci[n] + 6] -= LA[n]
            if cj[n] >= 0:
                J[rows[n] : rows[n] + 6, cj[n] : cj[n] + 6] += LA[n]
        return J

    def retract(x, d):
        out = list(x)
        for k in free:
            out[index[k]] = se3_exp(d[col[k] : col[k] + 6]) @ x[index[k]]
        return out

    x0 = [nodes[k] for k in ids]
    x, report = levenberg_marquardt(fun, x0, settings, jac=jac, retract=retract)
    return PgoResult({k: x[index[k]] for k in ids}, report, report.initial_cost, report.cost)


def graph_cost(nodes: dict, edges) -> float:
    r = np.concatenate([e.sqrt_info @ se3_log(e.delta.inverse() @ nodes[e.i].inverse() @ nodes[e.j]) for e in edges])
    return 0.5 * float(r @ r)


# ---------------------------------------------------------------- worker


@dataclass
class LoopEvent:
    keyframe_id: int
    candidate_id: int
    n_landmarks: int
    rmse: float


class LoopCloser:
    """Consumes keyframe payloads: map integration, loop search, PGO."""

    def __init__(self, rig: CameraRig, frontend, radius: float = LOOP_RADIUS, exclusion: int = TEMPORAL_EXCLUSION,
                 weighted: bool = False, pgo_settings: LmSettings = LmSettings(max_iterations=50), refine: bool = True):
        self.rig = rig
        self.refine = refine
        self.frontend = frontend
        self.radius = radius
        self.exclusion = exclusion
        self.weighted = weighted
        self.pgo_settings = pgo_settings
        self.map = GlobalMap()
        self.loops: list[LoopEvent] = []
        self.corrections: list[dict] = []

    def process(self, payload) -> LoopEvent | None:
        kf = integrate_keyframe(self.map, payload).keyframes[payload.keyframe_id]
        views = payload.views
        payload.views = []  # the map keeps no images
        if not views:
            return None
        recent = list(self.map.keyframes)[-(self.exclusion + 1):]
        cands = [c for c in self.map.query_nearby_poses(kf.pose.t, self.radius) if c not in recent]
        if not cands:
            return None
        guess = kf.pose.inverse()
        sel = select_loop_landmarks(self.map, cands, views, guess, self.rig, self.frontend)
        if sel is None or len(sel.landmark_ids) < MIN_LOOP_LANDMARKS:
            return None
        est = estimate_loop_delta(sel.positions, sel.matches, self.rig, guess)
        if est is None or not est.accepted:
            return None
        T, cov = (refine_loop_pose(self.map, sel, est, views, self.rig, self.frontend) if self.refine else (est.pose, None))
        if cov is not None and np.sqrt(np.trace(cov[3:, 3:])) > MAX_LOOP_SIGMA_T:
            log.info("loop %d -> %d too weakly constrained", sel.keyframe_id, kf.id)
            return None
        T_loop = T.inverse()
        D = self.map.keyframes[sel.keyframe_id].pose.inverse() @ T_loop
        L = np.eye(6) / (np.sqrt(LOOP_VARIANCE_SCALE) if self.weighted else 1.0)
        self.map.add_edge(PoseGraphEdge(sel.keyframe_id, kf.id, D, L, "loop"))
        try:
            res = optimize_pose_graph(self.map.poses(), self.map.edges, settings=self.pgo_settings)
        except (DisconnectedGraphError, NoConvergenceError) as exc:
            log.warning("pose graph optimization failed: %s", exc)
            return None
        self.map.set_poses(res.poses)
        self.corrections.append(dict(res.poses))
        ev = LoopEvent(kf.id, sel.keyframe_id, len(sel.landmark_ids), est.rmse)
        self.loops.append(ev)
        log.info("loop %d -> %d with %d landmarks (rmse %.3f px)", ev.candidate_id, ev.keyframe_id, ev.n_landmarks, ev.rmse)
        return ev


class BackendWorker:
    """Bounded queue in front of a LoopCloser; ``deterministic`` runs inline."""

    _STOP = object()

    def __init__(self, closer: LoopCloser, deterministic: bool = True, maxsize: int = 64):
        self.closer = closer
        self.deterministic = deterministic
        self._q = None
        self._thread = None
        self._error = None
        if not deterministic:
            self._q = queue.Queue(maxsize)
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()

    def submit(self, payload) -> None:
        if self.deterministic:
            self.closer.process(payload)
        else:
            self._q.put(payload)

    def _run(self):
        while True:
            item = self._q.get()
            try:
                if item is self._STOP:
                    return
                self.closer.process(item)
            except Exception as exc:  # surfaced on finish()
                self._error = exc
            finally:
                self._q.task_done()

    def finish(self) -> GlobalMap:
        if self._thread is not None:
            self._q.put(self._STOP)
            self._thread.join()
            self._thread = None
        if self._error is not None:
            raise self._error
        return self.closer.map
