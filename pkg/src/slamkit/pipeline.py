"""Mode orchestration: frontend, local map, per-mode pose solver, backend."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .backend import BackendWorker, GlobalMap, LoopCloser
from .errors import BootstrapFailure, ConfigError, DegenerateGeometryError, BehindCameraError, InsufficientDataError, NoConvergenceError
from .frontend2d import FeatureGridConfig, KeyframePolicy, LKParams
from .frontends import FrameBundle, ImageFrontend, KeypointFrontend
from .geometry import CameraRig, NoiseModel, RigidTransform
from .localmap import Keyframe, Landmark, Observation, triangulate
from .multicam import MultiCamTracker, TrackerConfig, build_frustum_graph, FrustumGraph
from .solvers import LmSettings, estimate_fundamental_ransac, pose_from_fundamental
from .trajectory import TrajectoryEstimate

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    MONO = "mono"
    STEREO = "stereo"
    MULTI_STEREO = "multi-stereo"
    STEREO_INERTIAL = "stereo-inertial"
    MONO_DEPTH = "mono-depth"


@dataclass(frozen=True)
class PipelineConfig:
    """Flat configuration; every field is a documented ``key = value`` entry."""

    mode: str = "stereo"
    frontend: str = "auto"  # auto | image | keypoint
    slam: bool = False
    deterministic_backend: bool = True
    seed: int = 0
    # keyframes and local map
    keyframe_threshold: float = 0.7
    window: int = 10
    pixel_sigma: float = 1.0
    huber: float = 1.345
    sba: bool = True
    async_sba: bool = False
    sba_iterations: int = 5
    min_parallax_deg: float = 0.5
    # 2D frontend
    pyramid_levels: int = 4
    lk_window: int = 11
    ncc_min: float = 0.8
    grid_n: int = 8
    grid_m: int = 6
    grid_min_total: int = 300
    # frustum graph
    fig_plane_distance: float = 3.0
    fig_samples: int = 16
    fig_threshold: float = 0.2
    # backend
    loop_radius: float = 5.0
    loop_exclusion: int = 3
    loop_weighted: bool = False
    # inertial
    gravity_keyframes: int = 6
    min_excitation: float = 1e-2
    gyro_density: float = 1.7e-4
    accel_density: float = 2.0e-3
    gyro_walk: float = 1.9e-5
    accel_walk: float = 3.0e-3
    # mono-depth
    rgbd_levels: int = 4
    rgbd_dense: bool = True
    rgbd_sigma_i: float = 0.01
    rgbd_depth_coeff: float = 0.01
    rgbd_sigma_p: float = 0.01
    rgbd_budget: int = 3000
    # mono bootstrap
    mono_min_matches: int = 50
    mono_min_disparity: float = 1.0

    def __post_init__(self):
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}") from None
        if self.frontend not in ("auto", "image", "keypoint"):
            raise ConfigError(f"unknown frontend {self.frontend!r}")

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            key = k.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown configuration key {k!r}")
            kw[key] = _coerce(known[key].default, v, k)
        return cls(**kw)

    @classmethod
    def read(cls, path, **overrides) -> "PipelineConfig":
        d = parse_key_values(path)
        d.update(overrides)
        return cls.from_dict(d)

    def with_(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


def parse_key_values(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; duplicate keys are an error."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (x.strip() for x in s.split("=", 1))
            if k in out:
                raise ConfigError(f"{path}:{n}: duplicate key {k!r}")
            out[k] = v
    return out


def _coerce(default, v, name):
    if not isinstance(v, str):
        return v
    try:
        if isinstance(default, bool):
            low = v.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(v)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(v)
        if isinstance(default, float):
            return float(v)
    except ValueError:
        raise ConfigError(f"bad value {v!r} for {name}") from None
    return v


@dataclass
class RunResult:
    trajectory: TrajectoryEstimate  # exported (SLAM-corrected when enabled)
    odometry: TrajectoryEstimate  # live frontend output
    global_map: GlobalMap | None = None
    loops: list = field(default_factory=list)
    gravity: np.ndarray | None = None  # specific-force gravity in the odometry world
    keyframes: int = 0


# ------------------------------------------------------------------ helpers


def make_frontend(cfg: PipelineConfig, first: FrameBundle):
    kind = cfg.frontend
    if kind == "auto":
        kind = "keypoint" if first.keypoints is not None and first.images is None else "image"
    if kind == "keypoint":
        return KeypointFrontend()
    grid = FeatureGridConfig(cfg.grid_n, cfg.grid_m, cfg.grid_min_total)
    return ImageFrontend(cfg.pyramid_levels, grid, LKParams(window=cfg.lk_window, ncc_min=cfg.ncc_min))


def tracker_config(cfg: PipelineConfig) -> TrackerConfig:
    return TrackerConfig(
        policy=KeyframePolicy(cfg.keyframe_threshold),
        window=cfg.window,
        pixel_noise=NoiseModel.isotropic(cfg.pixel_sigma),
        huber=cfg.huber,
        sba_settings=LmSettings(max_iterations=cfg.sba_iterations),
        sba=cfg.sba,
        async_sba=cfg.async_sba and not cfg.deterministic_backend,
        min_parallax_deg=cfg.min_parallax_deg,
        nominal_depth=cfg.fig_plane_distance,
    )


def _check_inputs(cfg: PipelineConfig, rig: CameraRig, first: FrameBundle):
    mode = Mode(cfg.mode)
    if mode in (Mode.STEREO, Mode.STEREO_INERTIAL, Mode.MULTI_STEREO) and len(rig) < 2:
        raise ConfigError(f"{mode.value} needs at least two cameras")
    if mode in (Mode.MONO, Mode.MONO_DEPTH) and len(rig) != 1:
        raise ConfigError(f"{mode.value} uses exactly one camera")
    if mode is Mode.MONO_DEPTH and (first.depths is None or first.images is None):
        raise ConfigError("mono-depth needs intensity and depth images")
    if first.n_cameras != len(rig):
        raise ConfigError(f"frames carry {first.n_cameras} cameras, calibration has {len(rig)}")


def _export(tracker: MultiCamTracker, odo: TrajectoryEstimate, gmap: GlobalMap | None) -> TrajectoryEstimate:
    """Apply the backend's keyframe corrections to every frame after the run."""
    if gmap is None or not len(gmap):
        return TrajectoryEstimate(list(odo.timestamps), list(odo.poses), list(odo.status))
    out = TrajectoryEstimate()
    kf_frames = sorted(tracker.kf_frame)
    ref = None
    k = 0
    for i, (t, T_bw, st) in enumerate(zip(odo.timestamps, odo.poses, odo.status)):
        while k < len(kf_frames) and kf_frames[k] <= i:
            ref = tracker.kf_frame[kf_frames[k]]
            k += 1
        if ref is None or ref not in gmap.keyframes:
            out.append(t, T_bw, st)
            continue
        mk = gmap.keyframes[ref]
        T_wb = mk.pose @ mk.odom_pose.inverse() @ T_bw.inverse()
        out.append(t, T_wb.inverse(), st)
    return out


# ------------------------------------------------------------------ mono


@dataclass
class BootstrapResult:
    pose: RigidTransform  # T_bw of the current frame, reference at identity-relative frame
    points: dict  # track id -> p_w
    scale: float


def mono_bootstrap(tracker: MultiCamTracker, min_matches: int = 50, min_disparity: float = 1.0, seed: int = 0,
                   min_parallax_deg: float = 0.5) -> BootstrapResult:
    """Two-view initialization between the reference keyframe and the current frame.

    Returns the current pose (world = reference keyframe's world) and the
    triangulated landmarks with median depth normalized to one.
    """
    kf0 = tracker.map.newest
    ref_frame = max(f for f, k in tracker.kf_frame.items() if k == kf0.id)
    cam = tracker.rig.camera(0)
    tracks = [t for t in tracker.tracks[0] if t.is_live and t.frames[0] == ref_frame and len(t.frames) > 1]
    if len(tracks) < min_matches:
        raise BootstrapFailure(f"{len(tracks)} tracked matches, need {min_matches}")
    x1 = np.array([t.positions[0] for t in tracks])
    x2 = np.array([t.position for t in tracks])
    if np.median(np.linalg.norm(x2 - x1, axis=1)) <= min_disparity:
        raise BootstrapFailure("median disparity too small")
    F, mask = estimate_fundamental_ransac(x1, x2, seed=seed)
    if mask.sum() < min_matches // 2:
        raise BootstrapFailure(f"only {mask.sum()} fundamental inliers")
    T21 = pose_from_fundamental(F, cam, x1, x2, mask, min_parallax_deg)  # camera 2 from camera 1
    T_cb = tracker.rig.extrinsic(0)
    T1_cw = T_cb @ kf0.pose
    pts = {}
    for t, ok, a, b in zip(tracks, mask, x1, x2):
        if not ok:
            continue
        try:
            pts[t.id] = triangulate([(RigidTransform.identity(), cam, a), (T21, cam, b)], min_parallax_deg)
        except (DegenerateGeometryError, BehindCameraError):
            continue
    if len(pts) < min_matches // 2:
        raise BootstrapFailure(f"only {len(pts)} landmarks triangulated")
    depth = np.median([p[2] for p in pts.values()])
    s = 1.0 / depth
    T21s = RigidTransform(T21.rotation, T21.t * s)
    T1_wc = T1_cw.inverse()
    world = {tid: T1_wc.apply(p * s) for tid, p in pts.items()}
    T2_bw = T_cb.inverse() @ T21s @ T1_cw
    return BootstrapResult(T2_bw, world, s)


def _install_bootstrap(tracker: MultiCamTracker, res: BootstrapResult, timestamp: float):
    """New keyframe at the current frame carrying the bootstrap landmarks."""
    kf0 = tracker.map.newest
    ref_frame = max(f for f, k in tracker.kf_frame.items() if k == kf0.id)
    kf_id = tracker._next_kf
    tracker._next_kf += 1
    lms, obs = [], []
    by_id = {t.id: t for t in tracker.tracks[0]}
    for tid in sorted(res.points):
        t = by_id[tid]
        lm = tracker._next_lm
        tracker._next_lm += 1
        lms.append(Landmark(lm, res.points[tid], tid))
        obs.append(Observation(lm, kf0.id, 0, tuple(map(float, t.positions[t.frames.index(ref_frame)]))))
        obs.append(Observation(lm, kf_id, 0, tuple(map(float, t.position))))
    tracker.map.insert_keyframe(Keyframe(kf_id, timestamp, res.pose), lms, obs)
    tracker.kf_frame[tracker.frame] = kf_id
    pose = res.pose
    if tracker.cfg.sba:
        pose = tracker._run_sba(kf_id, pose)
    for key, px in tracker.frontend.select(tracker.views[0], [t for t in tracker.tracks[0] if t.is_live]):
        tracker.tracks[0].append(tracker._new_track(0, px, key))
    tracker.s_kf = {t.id for t in tracker.live_tracks()}
    tracker.force_keyframe = False
    tracker.last_kf_pose = pose.inverse()
    return pose


# ------------------------------------------------------------- per mode


class _InertialSolver:
    """Stereo until gravity is observable, then IMU + visual two-state solves."""

    def __init__(self, cfg: PipelineConfig, rig: CameraRig):
        from . import vio

        self.vio = vio
        self.cfg = cfg
        self.rig = rig
        self.noise = vio.ImuNoise(cfg.gyro_density, cfg.accel_density, cfg.gyro_walk, cfg.accel_walk)
        self.gravity = None
        self.state = None
        self.kf_poses = []  # T_wb
        self.kf_samples = []  # IMU samples between consecutive keyframes
        self._since_kf = []
        self._frame_samples = []

    def add_imu(self, samples):
        s = list(samples)
        self._frame_samples = s
        if self._since_kf and s and s[0].timestamp == self._since_kf[-1].timestamp:
            s = s[1:]
        self._since_kf.extend(s)

    def __call__(self, tracker, init):
        ids, pairs, _ = tracker.visual_pairs()
        pre = self.vio.preintegrate(self._frame_samples, (self.state.accel_bias, self.state.gyro_bias), self.noise)
        prior = self.vio.PriorFactor.isotropic(self.state)
        res = self.vio.vi_pose_estimate(self.state, None, pre, self.gravity, self.rig, (), pairs, prior,
                                        NoiseModel.isotropic(self.cfg.pixel_sigma), huber=self.cfg.huber)
        self.state = res.curr
        return res.curr.pose.inverse(), len(pairs)

    def after_step(self, step, tracker):
        if self.gravity is not None and self.state is not None and step.status == "lost":
            self.state = replace(self.state, pose=step.pose.inverse())
        if not step.keyframe:
            return
        T_wb = step.pose.inverse()
        if self.gravity is not None:
            self.state = replace(self.state, pose=T_wb)
            return
        if self.kf_poses:
            self.kf_samples.append(self._since_kf)
        self.kf_poses.append(T_wb)
        self._since_kf = list(self._since_kf[-1:])
        if len(self.kf_poses) < self.cfg.gravity_keyframes:
            return
        try:
            pre = [self.vio.preintegrate(s, noise=self.noise) for s in self.kf_samples]
            g = self.vio.estimate_gravity(self.kf_poses, pre, min_excitation=self.cfg.min_excitation)
        except (self.vio.NotReadyError, InsufficientDataError) as exc:
            log.info("gravity not ready: %s", exc)
            return
        self.gravity = g.gravity
        self.state = self.vio.VioState(T_wb, g.velocities[-1], g.accel_bias, g.gyro_bias)
        log.info("gravity initialized: %s", np.round(g.gravity.g, 4))


class _DepthSolver:
    """Frame-to-frame dense RGB-D alignment with track matches and map points."""

    def __init__(self, cfg: PipelineConfig, rig: CameraRig):
        self.cfg = cfg
        self.rig = rig
        self.prev = None  # (image, depth, T_bw)
        self.curr = None

    def set_frame(self, bundle: FrameBundle):
        self.prev, self.curr = self.curr, (bundle.images[0], bundle.depths[0])

    def __call__(self, tracker, init):
        from .rgbd import solve_rgbd

        cam = self.rig.camera(0)
        T_cb = self.rig.extrinsic(0)
        T_prev = tracker.poses[-1]
        T1_cw = T_cb @ T_prev
        init21 = T_cb @ init @ T_prev.inverse() @ T_cb.inverse()
        f = tracker.frame
        matches, mf = [], []
        for t in tracker.tracks[0]:
            if t.is_live and len(t.frames) >= 2 and t.frames[-2] == f - 1:
                matches.append(np.concatenate([t.positions[-2], t.positions[-1]]))
                lm = tracker.landmark_of(t)
                if lm is not None:
                    mf.append((T1_cw.apply(tracker.map.landmarks[lm].position), t.position))
        I1, Z1 = self.prev
        I2, Z2 = self.curr
        res = solve_rgbd(I1, Z1, I2, Z2, cam, matches=np.array(matches).reshape(-1, 4), map_factors=mf, init=init21,
                         levels=self.cfg.rgbd_levels, dense=self.cfg.rgbd_dense, sigma_I=self.cfg.rgbd_sigma_i,
                         depth_coeff=self.cfg.rgbd_depth_coeff, sigma_p=self.cfg.rgbd_sigma_p,
                         pixel_noise=NoiseModel.isotropic(self.cfg.pixel_sigma), budget=self.cfg.rgbd_budget)
        T_bw = T_cb.inverse() @ res.pose @ T1_cw
        return T_bw, len(matches)


# -------------------------------------------------------------------- run


def run(config: PipelineConfig, source, rig: CameraRig | None = None, initial_pose: RigidTransform | None = None,
        graph: FrustumGraph | None = None) -> RunResult:
    """Track every bundle of ``source`` (an iterable of FrameBundle, or an object with ``frames`` and ``rig``)."""
    rig = rig if rig is not None else getattr(source, "rig", None)
    if rig is None:
        raise ConfigError("no rig calibration")
    frames = getattr(source, "frames", source)
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise InsufficientDataError("empty frame source") from None
    _check_inputs(config, rig, first)
    mode = Mode(config.mode)
    np.random.seed(config.seed)
    frontend = make_frontend(config, first)
    if graph is None:
        graph = build_frustum_graph(rig, config.fig_plane_distance, config.fig_samples, config.fig_threshold)
    tracker = MultiCamTracker(rig, frontend, graph, tracker_config(config))
    if initial_pose is not None:
        tracker.initial_pose = initial_pose
    worker = None
    if config.slam:
        closer = LoopCloser(rig, frontend, config.loop_radius, config.loop_exclusion, config.loop_weighted)
        worker = BackendWorker(closer, deterministic=config.deterministic_backend)
    inertial = _InertialSolver(config, rig) if mode is Mode.STEREO_INERTIAL else None
    depth = _DepthSolver(config, rig) if mode is Mode.MONO_DEPTH else None

    odo = TrajectoryEstimate()
    n_kf = 0
    bootstrapped = mode is not Mode.MONO
    was_lost = False

    def bundles():
        yield first
        yield from it

    for bundle in bundles():
        if inertial is not None:
            inertial.add_imu(bundle.imu)
        if depth is not None:
            depth.set_frame(bundle)
        if not bootstrapped and tracker.initialized:
            tracker.advance(bundle)
            try:
                b = mono_bootstrap(tracker, config.mono_min_matches, config.mono_min_disparity, config.seed,
                                   config.min_parallax_deg)
            except (BootstrapFailure, NoConvergenceError, InsufficientDataError) as exc:
                log.info("bootstrap retry: %s", exc)
                live = sum(1 for t in tracker.tracks[0] if t.is_live)
                pose = tracker.poses[-1]
                tracker.poses.append(pose)
                odo.append(bundle.timestamp, pose, "lost")
                if live < config.mono_min_matches:
                    # re-seed the reference keyframe at the held pose
                    tracker.map = type(tracker.map)(rig, config.window)
                    tracker.kf_frame.clear()
                    tracker.tracks[0] = []
                    tracker.last_kf_pose = None
                    tracker.poses.pop()
                    pose, payload = tracker.make_keyframe(bundle.timestamp, pose)
                    tracker.poses.append(pose)
                continue
            pose = _install_bootstrap(tracker, b, bundle.timestamp)
            tracker.poses.append(pose)
            odo.append(bundle.timestamp, pose, "keyframe")
            bootstrapped = True
            n_kf += 1
            continue
        solver = None
        if inertial is not None and inertial.gravity is not None:
            solver = inertial
        elif depth is not None and depth.prev is not None:
            solver = depth
        step = tracker.step(bundle, solver)
        status = step.status
        if was_lost and step.keyframe:
            status = "relocalized"
        was_lost = step.status == "lost"
        odo.append(bundle.timestamp, step.pose, status)
        if inertial is not None:
            inertial.after_step(step, tracker)
        if step.keyframe:
            n_kf += 1
            if worker is not None and step.payload is not None:
                worker.submit(step.payload)
    tracker.close()
    gmap = worker.finish() if worker is not None else None
    traj = _export(tracker, odo, gmap) if config.slam else odo
    grav = inertial.gravity.g if inertial is not None and inertial.gravity is not None else None
    loops = list(worker.closer.loops) if worker is not None else []
    return RunResult(traj, odo, gmap, loops, grav, n_kf)
