"""Multi-camera visual odometry: frustum intersection graph and the tracker.

The tracker is shared by every camera configuration. A stereo pair is a two
camera rig whose graph holds one tracking edge; a single camera has no
edges and builds landmarks from temporal parallax between keyframes.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    InsufficientConstraintsError,
    InvalidProblemError,
    NoConvergenceError,
    SynchronizationError,
)
from .frontend2d import KeyframePolicy, Track, keyframe_due
from .frontends import FrameBundle, KeypointFrontend
from .geometry import DEPTH_EPS, CameraRig, NoiseModel, RigidTransform
from .localmap import Keyframe, Landmark, LocalMap, Observation, reprojection_error, triangulate
from .solvers import LmSettings, reprojection_blocks, solve_pnp, sparse_bundle_adjustment

log = logging.getLogger(__name__)

PLANE_DISTANCE = 3.0
SAMPLES_PER_AXIS = 16
OVERLAP_THRESHOLD = 0.2
MAX_CAMERAS = 32
SYNC_TOLERANCE = 1e-3  # s


# --------------------------------------------------------------- the graph


@dataclass(frozen=True)
class FrustumGraph:
    n_cameras: int
    edges: dict  # (i, j) -> overlap ratio
    threshold: float = OVERLAP_THRESHOLD

    def __post_init__(self):
        for (i, j), ratio in self.edges.items():
            if i == j:
                raise ValueError("self edge in frustum graph")
            if not (0 < ratio <= 1) or ratio < self.threshold:
                raise ValueError(f"edge {i}->{j} ratio {ratio} below threshold")

    def tracking_edges(self) -> list:
        """Edges used for cross-camera tracking; a mutual pair is tracked from its lower index."""
        out = []
        for (i, j) in sorted(self.edges):
            if (j, i) in self.edges and j < i:
                continue
            out.append((i, j))
        return out

    def tracked_cameras(self) -> list:
        """Sources of tracking edges plus cameras without any edge."""
        srcs = {i for i, _ in self.tracking_edges()}
        touched = {c for e in self.edges for c in e}
        return sorted(srcs | (set(range(self.n_cameras)) - touched))


def _grid(cam, s: int) -> np.ndarray:
    u = (np.arange(s) + 0.5) * cam.width / s - 0.5
    v = (np.arange(s) + 0.5) * cam.height / s - 0.5
    uu, vv = np.meshgrid(u, v)
    return np.column_stack([uu.ravel(), vv.ravel()])


def overlap_ratio(rig: CameraRig, i: int, j: int, plane_distance: float = PLANE_DISTANCE, samples_per_axis: int = SAMPLES_PER_AXIS) -> float:
    ci, cj = rig.camera(i), rig.camera(j)
    px = _grid(ci, samples_per_axis)
    P = np.column_stack([(px[:, 0] - ci.cx) / ci.fx, (px[:, 1] - ci.cy) / ci.fy, np.ones(len(px))]) * plane_distance
    T_ji = rig.extrinsic(j) @ rig.extrinsic(i).inverse()
    Q = T_ji.apply(P)
    front = Q[:, 2] > DEPTH_EPS
    z = np.where(front, Q[:, 2], 1.0)
    uv = np.column_stack([cj.fx * Q[:, 0] / z + cj.cx, cj.fy * Q[:, 1] / z + cj.cy])
    return float(np.count_nonzero(front & cj.in_bounds(uv))) / len(px)


def build_frustum_graph(rig: CameraRig, plane_distance: float = PLANE_DISTANCE, samples_per_axis: int = SAMPLES_PER_AXIS,
                        overlap_threshold: float = OVERLAP_THRESHOLD) -> FrustumGraph:
    """Directed edge i->j iff the share of i's virtual-plane samples seen by j exceeds the threshold."""
    n = len(rig)
    if n < 1:
        raise ValueError("rig needs at least one camera")
    if n > MAX_CAMERAS:
        raise ValueError(f"at most {MAX_CAMERAS} cameras")
    edges = {}
    for i in range(n):
        for j in range(n):
            if i != j:
                r = overlap_ratio(rig, i, j, plane_distance, samples_per_axis)
                if r > overlap_threshold:
                    edges[(i, j)] = r
    return FrustumGraph(n, edges, overlap_threshold)


# ------------------------------------------------------------- the tracker


@dataclass
class KeyframePayload:
    """What the backend receives for one keyframe."""

    keyframe_id: int
    timestamp: float
    pose: RigidTransform  # T_bw
    delta: RigidTransform  # T_wb(prev)^-1 T_wb(this)
    landmarks: dict  # id -> p_w
    observations: list  # (landmark_id, camera_index, pixel)
    features: dict  # (landmark_id, camera_index) -> descriptor
    views: list = field(default_factory=list)


@dataclass
class StepResult:
    pose: RigidTransform  # T_bw
    keyframe: bool
    status: str  # tracked | keyframe | lost
    inliers: int = 0
    payload: KeyframePayload | None = None


@dataclass
class TrackerConfig:
    policy: KeyframePolicy = KeyframePolicy()
    window: int = 10
    pixel_noise: NoiseModel | None = None
    huber: float = 1.345
    pnp_settings: LmSettings = LmSettings(max_iterations=30)
    sba_settings: LmSettings = LmSettings(max_iterations=15)
    sba: bool = True
    async_sba: bool = False
    min_parallax_deg: float = 0.5
    max_reprojection: float = 2.0  # px, triangulation acceptance
    nominal_depth: float = PLANE_DISTANCE
    min_landmarks: int = 6
    track_chi2: float = 13.82  # whitened squared error beyond which a track is dropped (99.9 %, 2 dof)


class MultiCamTracker:
    """Per-frame tracking, keyframe events and the local map for one rig."""

    def __init__(self, rig: CameraRig, frontend, graph: FrustumGraph | None = None, config: TrackerConfig = TrackerConfig()):
        self.rig = rig
        self.frontend = frontend
        self.graph = graph if graph is not None else build_frustum_graph(rig)
        self.cfg = config
        self.cams = self.graph.tracked_cameras()
        self.edges = self.graph.tracking_edges()
        self.map = LocalMap(rig, config.window)
        self.tracks: dict[int, list] = {k: [] for k in range(len(rig))}
        self.views = None
        self.frame = -1
        self.poses: list = []  # T_bw per processed frame
        self.s_kf: set = set()
        self.kf_frame: dict[int, int] = {}  # frame index -> keyframe id
        self.last_kf_pose: RigidTransform | None = None
        self.initial_pose = RigidTransform.identity()
        self.force_keyframe = True
        self._next_track = 0
        self._next_lm = 0
        self._next_kf = 0
        self._pool = concurrent.futures.ThreadPoolExecutor(1) if config.async_sba else None
        self._pending = None

    # ---------------------------------------------------------------- API

    @property
    def initialized(self) -> bool:
        return bool(self.map.keyframes)

    def live_tracks(self):
        for k in self.cams:
            for t in self.tracks[k]:
                if t.is_live:
                    yield t

    def landmark_of(self, t: Track):
        lm = self.map.track_to_landmark.get(t.id)
        return lm if lm in self.map.landmarks else None

    def predict(self) -> RigidTransform:
        """Constant-velocity prediction of the next T_bw."""
        if not self.poses:
            return RigidTransform.identity()
        if len(self.poses) == 1:
            return self.poses[-1]
        return (self.poses[-1] @ self.poses[-2].inverse()) @ self.poses[-1]

    def advance(self, bundle: FrameBundle) -> list:
        """Read the frame and run temporal tracking; returns the per-camera views."""
        if bundle.timestamps is not None and np.ptp(np.asarray(bundle.timestamps, dtype=float)) > SYNC_TOLERANCE:
            raise SynchronizationError("camera timestamps in one bundle differ")
        if bundle.n_cameras != len(self.rig):
            raise SynchronizationError(f"bundle has {bundle.n_cameras} cameras, rig has {len(self.rig)}")
        self._collect_sba()
        self.frame += 1
        views = self.frontend.prepare(bundle)
        if self.views is not None:
            for k in self.cams:
                self.frontend.track(self.views[k], views[k], self.tracks[k], self.frame)
                self.tracks[k] = [t for t in self.tracks[k] if t.is_live]
        self.views = views
        return views

    def visual_pairs(self):
        """``(landmark_ids, [(p_w, {cam: px})])`` for live tracks linked to landmarks."""
        by_lm = {}
        tracks = {}
        for t in self.live_tracks():
            lm = self.landmark_of(t)
            if lm is None:
                continue
            by_lm.setdefault(lm, {})[t.camera_id] = t.position
            tracks.setdefault(lm, []).append(t)
        ids = sorted(by_lm)
        return ids, [(self.map.landmarks[i].position, by_lm[i]) for i in ids], tracks

    def solve_pose(self, init: RigidTransform):
        ids, pairs, tracks = self.visual_pairs()
        res = solve_pnp(pairs, self.rig, init, self.cfg.pixel_noise, self.cfg.pnp_settings, self.cfg.huber)
        # tracks die only on gross errors; the 95 % inlier mask would cull good tracks every frame
        flat = [(lm, k, p, px) for lm, (p, obs) in zip(ids, pairs) for k, px in obs.items()]
        P = np.array([f[2] for f in flat])
        cams = np.array([f[1] for f in flat])
        pix = np.array([f[3] for f in flat])
        r, _, _ = reprojection_blocks(self.rig, [res.pose], np.zeros(len(P), int), P, np.arange(len(P)), cams, pix)
        L = np.eye(2) if self.cfg.pixel_noise is None else self.cfg.pixel_noise.sqrt_information(2)
        bad = ~(np.sum((r @ L.T) ** 2, axis=1) < self.cfg.track_chi2)
        for (lm, k, _, _), b in zip(flat, bad):
            if b:
                for t in tracks[lm]:
                    if t.camera_id == k:
                        t.mark_lost()
        return res.pose, int(res.inliers.sum())

    def step(self, bundle: FrameBundle, pose_solver=None) -> StepResult:
        """Track one bundle: temporal LK, pose solve over all cameras, keyframe event.

        ``pose_solver(tracker, init) -> (T_bw, n_inliers)`` replaces PnP (used by
        the inertial and depth modes).
        """
        self.advance(bundle)
        if not self.initialized:
            pose = self.initial_pose if not self.poses else self.poses[-1]
            return self._finish(bundle, pose, True, "keyframe", 0)
        init = self.predict()
        status = "tracked"
        try:
            if pose_solver is not None:
                pose, n_in = pose_solver(self, init)
            else:
                pose, n_in = self.solve_pose(init)
        except (InsufficientConstraintsError, NoConvergenceError) as exc:
            log.info("frame %d: pose solve failed (%s); holding pose", self.frame, exc)
            if self.force_keyframe:
                # second failure in a row: re-seed the map at the held pose
                return self._finish(bundle, self.poses[-1], True, "lost", 0)
            self.force_keyframe = True
            self.poses.append(self.poses[-1])
            return StepResult(self.poses[-1], False, "lost", 0)
        s_curr = {t.id for t in self.live_tracks()}
        due = self.force_keyframe or not self.s_kf or keyframe_due(s_curr, self.s_kf, self.cfg.policy)
        due = due or n_in < self.cfg.min_landmarks
        return self._finish(bundle, pose, due, "keyframe" if due else status, n_in)

    def _finish(self, bundle, pose, is_kf, status, n_in) -> StepResult:
        payload = None
        if is_kf:
            pose, payload = self.make_keyframe(bundle.timestamp, pose)
        self.poses.append(pose)
        return StepResult(pose, is_kf, status, n_in, payload)

    def close(self):
        self._collect_sba(wait=True)
        if self._pool is not None:
            self._pool.shutdown()

    # ---------------------------------------------------------- keyframes

    def _new_track(self, cam: int, px, key) -> Track:
        t = Track(self._next_track, cam, [np.asarray(px, dtype=float)], [self.frame])
        self._next_track += 1
        if key is not None and isinstance(self.frontend, KeypointFrontend):
            self.frontend.register(t, key)
        return t

    def _cross_seeds(self, T_bw, i, j, tracks):
        ci, cj = self.rig.camera(i), self.rig.camera(j)
        T_ci, T_cj = self.rig.camera_from_world(i, T_bw), self.rig.camera_from_world(j, T_bw)
        seeds = []
        for t in tracks:
            lm = self.landmark_of(t)
            if lm is not None:
                p = self.map.landmarks[lm].position
            else:
                x, y = t.position
                d = self.cfg.nominal_depth
                p = T_ci.inverse().apply(np.array([(x - ci.cx) / ci.fx * d, (y - ci.cy) / ci.fy * d, d]))
            q = T_cj.apply(p)
            if q[2] > DEPTH_EPS:
                seeds.append([cj.fx * q[0] / q[2] + cj.cx, cj.fy * q[1] / q[2] + cj.cy])
            else:
                seeds.append(list(t.position))
        return np.array(seeds, dtype=float).reshape(-1, 2)

    def _accept(self, rays, p) -> bool:
        return bool(np.all(reprojection_error(rays, p) < self.cfg.max_reprojection))

    def make_keyframe(self, timestamp: float, pose: RigidTransform):
        kf_id = self._next_kf
        self._next_kf += 1
        views = self.views
        # top up features in each tracked camera
        for k in self.cams:
            live = [t for t in self.tracks[k] if t.is_live]
            for key, px in self.frontend.select(views[k], live):
                self.tracks[k].append(self._new_track(k, px, key))

        new_lms, obs = [], []
        obs_keys = set()

        def add_obs(lm, cam, px):
            if (lm, cam) not in obs_keys and self.rig.camera(cam).in_bounds(np.asarray(px)):
                obs_keys.add((lm, cam))
                obs.append(Observation(lm, kf_id, cam, tuple(float(v) for v in px)))

        fresh: dict[int, int] = {}  # track id -> landmark created in this keyframe
        fresh_pos: dict[int, np.ndarray] = {}
        for t in self.live_tracks():
            lm = self.landmark_of(t)
            if lm is not None:
                add_obs(lm, t.camera_id, t.position)

        # cross-camera tracking along graph edges
        cross_px: dict[tuple, tuple] = {}
        for i, j in self.edges:
            cand = [t for t in self.tracks[i] if t.is_live]
            if not cand:
                continue
            seeds = self._cross_seeds(pose, i, j, cand)
            matched = self.frontend.cross(views[i], views[j], cand, seeds)
            T_ci, T_cj = self.rig.camera_from_world(i, pose), self.rig.camera_from_world(j, pose)
            for t in cand:
                px = matched.get(t.id)
                if px is None:
                    continue
                cross_px[(t.id, j)] = px
                lm = self.landmark_of(t)
                if lm is None and t.id in fresh:
                    lm = fresh[t.id]
                rays = [(T_ci, self.rig.camera(i), t.position), (T_cj, self.rig.camera(j), np.asarray(px))]
                if lm is not None:
                    p = self.map.landmarks[lm].position if lm in self.map.landmarks else fresh_pos[lm]
                    if self._accept(rays[1:], p):
                        add_obs(lm, j, px)
                    continue
                try:
                    p = triangulate(rays, self.cfg.min_parallax_deg)
                except (DegenerateGeometryError, BehindCameraError):
                    continue
                if not self._accept(rays, p):
                    continue
                lm = self._next_lm
                self._next_lm += 1
                new_lms.append(Landmark(lm, p, t.id))
                fresh[t.id] = lm
                fresh_pos[lm] = p
                add_obs(lm, i, t.position)
                add_obs(lm, j, px)

        # temporal triangulation for cameras without a partner
        partnered = {i for i, _ in self.edges}
        for k in self.cams:
            if k in partnered:
                continue
            cam = self.rig.camera(k)
            T_now = self.rig.camera_from_world(k, pose)
            for t in self.tracks[k]:
                if not t.is_live or self.landmark_of(t) is not None or len(t.frames) < 2:
                    continue
                kf0 = self.kf_frame.get(t.frames[0])
                if kf0 is None or kf0 not in self.map.keyframes:
                    continue
                T_old = self.rig.camera_from_world(k, self.map.keyframes[kf0].pose)
                rays = [(T_old, cam, t.positions[0]), (T_now, cam, t.position)]
                try:
                    p = triangulate(rays, self.cfg.min_parallax_deg)
                except (DegenerateGeometryError, BehindCameraError):
                    continue
                if not self._accept(rays, p):
                    continue
                lm = self._next_lm
                self._next_lm += 1
                new_lms.append(Landmark(lm, p, t.id))
                obs.append(Observation(lm, kf0, k, tuple(float(v) for v in t.positions[0])))
                add_obs(lm, k, t.position)

        self.map.insert_keyframe(Keyframe(kf_id, timestamp, pose), new_lms, obs)
        self.kf_frame[self.frame] = kf_id
        if self.cfg.sba and len(self.map.keyframes) > 1:
            pose = self._run_sba(kf_id, pose)

        self.s_kf = {t.id for t in self.live_tracks()}
        self.force_keyframe = False
        T_wb = pose.inverse()
        delta = RigidTransform.identity() if self.last_kf_pose is None else self.last_kf_pose.inverse() @ T_wb
        self.last_kf_pose = T_wb
        payload = self._payload(kf_id, timestamp, pose, delta, obs_keys, cross_px, views)
        return pose, payload

    def _payload(self, kf_id, timestamp, pose, delta, obs_keys, cross_px, views):
        o = self.map.observations_of_keyframe(kf_id)
        lms = {ob.landmark_id: np.array(self.map.landmarks[ob.landmark_id].position) for ob in o}
        features = {}
        key_of = getattr(self.frontend, "key_of", {})
        track_of = {lm: tid for tid, lm in self.map.track_to_landmark.items()}
        for cam in range(len(self.rig)):
            sel = [ob for ob in o if ob.camera_index == cam]
            if not sel:
                continue
            keys = [key_of.get(track_of.get(ob.landmark_id)) for ob in sel]
            desc = self.frontend.describe(views[cam], [ob.pixel for ob in sel], kf_id, cam, keys)
            for ob, d in zip(sel, desc):
                if d is not None:
                    features[(ob.landmark_id, cam)] = d
        return KeyframePayload(kf_id, timestamp, pose, delta, lms, [(ob.landmark_id, ob.camera_index, ob.pixel) for ob in o], features, views)

    # ---------------------------------------------------------------- SBA

    def _run_sba(self, kf_id, pose):
        snap = self.map.snapshot()
        if self._pool is not None:
            if self._pending is None:
                self._pending = self._pool.submit(self._sba, snap)
            return pose
        res = self._sba(snap)
        if res is not None:
            self.map.merge(res.poses, res.landmarks)
            return self.map.keyframes[kf_id].pose
        return pose

    def _sba(self, snap):
        try:
            return sparse_bundle_adjustment(snap, self.cfg.sba_settings, self.cfg.pixel_noise, self.cfg.huber)
        except InvalidProblemError:
            return None

    def _collect_sba(self, wait: bool = False):
        if self._pending is None or not (wait or self._pending.done()):
            return
        res = self._pending.result()
        self._pending = None
        if res is not None:
            self.map.merge(res.poses, res.landmarks)


def multicam_step(frames: FrameBundle, state: MultiCamTracker, graph: FrustumGraph | None = None,
                  policy: KeyframePolicy | None = None, pose_solver=None) -> tuple:
    """Functional wrapper: ``(pose T_bw, state, keyframe flag)``."""
    if graph is not None and graph is not state.graph:
        raise ValueError("tracker was built for a different frustum graph")
    if policy is not None and policy != state.cfg.policy:
        raise ValueError("tracker was built with a different keyframe policy")
    res = state.step(frames, pose_solver)
    return res.pose, state, res.keyframe
