"""Synthetic sequences with exactly known ground truth.

A trajectory is a periodic cubic spline through waypoints; heading follows
the velocity, pitch and roll are small sinusoids. Keypoint frames are exact
projections of a landmark cloud on the walls of a room (plus optional pixel
noise); IMU samples come from analytic derivatives of the same spline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.interpolate import CubicSpline

from ..frontends import FrameBundle
from ..geometry import CameraModel, CameraRig, RigidTransform
from ..trajectory import TrajectoryEstimate
from ..vio import ImuSample

TRAJECTORIES = ("circle", "square", "figure8", "line", "static", "rotate")
RIGS = ("mono", "stereo", "quad-stereo")

# camera z forward, x right, y down; body x forward, y left, z up
R_CB = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SyntheticScene:
    trajectory: str = "circle"
    size: float = 3.0  # circle radius / square half side, m
    laps: float = 1.0
    n_frames: int = 200
    frame_rate: float = 20.0
    rig: str = "stereo"
    baseline: float = 0.1
    width: int = 640
    height: int = 480
    hfov_deg: float = 90.0
    n_landmarks: int = 3000
    room_margin: float = 4.0  # walls this far beyond the trajectory extent
    room_height: float = 3.0
    max_range: float = 25.0
    pixel_sigma: float = 0.0
    imu_rate: float = 200.0
    gyro_sigma: float = 0.0  # per-sample std, rad/s
    accel_sigma: float = 0.0  # per-sample std, m/s^2
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gravity_tilt_deg: float = 0.0
    pitch_amp_deg: float = 0.0
    roll_amp_deg: float = 0.0
    bob_amp: float = 0.0  # vertical oscillation, m
    wobble_freq: float = 0.5  # Hz, for pitch/roll/bob
    depth_sigma: float = 0.0
    occlusions: tuple = ()  # (camera, t_start, t_end)
    render_images: bool = False
    texture_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.rig not in RIGS:
            raise ValueError(f"unknown rig {self.rig!r}")
        if self.n_frames < 1 or self.frame_rate <= 0:
            raise ValueError("need a positive frame count and rate")

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.frame_rate

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown synthetic key {k!r}")
            kw[k] = _coerce(known[k], v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(f, v):
    if not isinstance(v, str):
        return v
    default = f.default
    if isinstance(default, bool):
        return v.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        if f.name == "occlusions":
            items = [s for s in v.split(";") if s.strip()]
            return tuple((int(a), float(b), float(c)) for a, b, c in (s.split(",") for s in items))
        return tuple(float(x) for x in v.split(","))
    return v.strip()


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _waypoints(kind: str, size: float) -> np.ndarray:
    if kind == "circle":
        a = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        return np.column_stack([size * np.cos(a), size * np.sin(a), np.zeros_like(a)])
    if kind == "square":
        s = size
        side = np.linspace(-s, s, 4, endpoint=False)
        pts = [(x, -s) for x in side] + [(s, y) for y in side] + [(-x, s) for x in side] + [(-s, -y) for y in side]
        return np.column_stack([np.array(pts), np.zeros(len(pts))])
    if kind == "figure8":
        a = np.linspace(0, 2 * np.pi, 24, endpoint=False)
        return np.column_stack([size * np.sin(a), 0.5 * size * np.sin(2 * a), np.zeros_like(a)])
    raise ValueError(kind)


class SplineTrajectory:
    """Body pose T_wb(t) with analytic velocity, acceleration and body rates."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        T = max(scene.duration, 1e-9)
        self.kind = scene.trajectory
        if self.kind in ("circle", "square", "figure8"):
            wp = _waypoints(self.kind, scene.size)
            lap = T / scene.laps
            s = np.linspace(0, lap, len(wp) + 1)
            self.spline = CubicSpline(s, np.vstack([wp, wp[:1]]), bc_type="periodic")
            self.period = lap
        elif self.kind == "line":
            self.spline = CubicSpline([0.0, T], np.array([[0.0, 0, 0], [scene.size, 0, 0]]), bc_type="natural")
            self.period = None
        else:
            self.spline = None
            self.period = None
        w = 2 * np.pi * scene.wobble_freq
        self._w = w
        self._pa = np.radians(scene.pitch_amp_deg)
        self._ra = np.radians(scene.roll_amp_deg)

    def _u(self, t):
        return np.mod(t, self.period) if self.period else t

    def position(self, t):
        base = np.zeros(3) if self.spline is None else self.spline(self._u(t))
        return base + np.array([0, 0, self.scene.bob_amp * np.sin(self._w * t)])

    def velocity(self, t):
        base = np.zeros(3) if self.spline is None else self.spline(self._u(t), 1)
        return base + np.array([0, 0, self.scene.bob_amp * self._w * np.cos(self._w * t)])

    def acceleration(self, t):
        base = np.zeros(3) if self.spline is None else self.spline(self._u(t), 2)
        return base - np.array([0, 0, self.scene.bob_amp * self._w**2 * np.sin(self._w * t)])

    def angles(self, t):
        """(yaw, pitch, roll) and their rates."""
        w = self._w
        pitch, dpitch = self._pa * np.sin(w * t), self._pa * w * np.cos(w * t)
        roll, droll = self._ra * np.sin(w * t + 1.0), self._ra * w * np.cos(w * t + 1.0)
        if self.kind == "static" or self.spline is None and self.kind != "rotate":
            yaw, dyaw = 0.0, 0.0
        elif self.kind == "rotate":
            rate = 2 * np.pi * self.scene.laps / max(self.scene.duration, 1e-9)
            yaw, dyaw = rate * t, rate
        else:
            v = self.spline(self._u(t), 1)
            a = self.spline(self._u(t), 2)
            yaw = np.arctan2(v[1], v[0])
            dyaw = (v[0] * a[1] - v[1] * a[0]) / (v[0] ** 2 + v[1] ** 2)
        return np.array([yaw, pitch, roll]), np.array([dyaw, dpitch, droll])

    def rotation(self, t):
        (y, p, r), _ = self.angles(t)
        return _rz(y) @ _ry(p) @ _rx(r)

    def pose(self, t) -> RigidTransform:
        """T_wb."""
        return RigidTransform.from_matrix(self.rotation(t), self.position(t))

    def gyro(self, t):
        (y, p, r), (dy, dp, dr) = self.angles(t)
        Rx, Ry = _rx(r), _ry(p)
        return Rx.T @ Ry.T @ np.array([0, 0, dy]) + Rx.T @ np.array([0, dp, 0]) + np.array([dr, 0, 0])

    def accel(self, t, gravity):
        return self.rotation(t).T @ (self.acceleration(t) + gravity)


def make_rig(scene: SyntheticScene) -> CameraRig:
    cam = CameraModel.from_fov(scene.width, scene.height, scene.hfov_deg)
    b = scene.baseline
    yaws = {"mono": [0.0], "stereo": [0.0], "quad-stereo": [0.0, np.pi / 2, np.pi, -np.pi / 2]}[scene.rig]
    out = []
    for yaw in yaws:
        R_bh = _rz(yaw)  # head frame in body
        offs = [0.0] if scene.rig == "mono" else [b / 2, -b / 2]  # left, right along head +y
        for off in offs:
            c_b = R_bh @ np.array([0.0, off, 0.0]) + R_bh @ np.array([0.05 if scene.rig == "quad-stereo" else 0.0, 0, 0])
            R_cb = R_CB @ R_bh.T
            out.append((cam, RigidTransform.from_matrix(R_cb, -R_cb @ c_b)))
    return CameraRig(tuple(out))


def room_bounds(scene: SyntheticScene, traj: SplineTrajectory):
    ts = np.linspace(0, scene.duration, 200)
    P = np.array([traj.position(t) for t in ts])
    lo, hi = P.min(0), P.max(0)
    m = scene.room_margin
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) + m
    half[2] = scene.room_height / 2
    center[2] = 0.0
    return center, half


def landmark_cloud(scene: SyntheticScene, traj: SplineTrajectory, rng) -> np.ndarray:
    """Points scattered over the four walls, floor and ceiling of the room."""
    c, h = room_bounds(scene, traj)
    n = scene.n_landmarks
    areas = np.array([h[1] * h[2]] * 2 + [h[0] * h[2]] * 2 + [h[0] * h[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, (n, 3))
    P = c + u * h
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    P[np.arange(n), axis] = c[axis] + sign * h[axis]
    return P


def render_scene(scene: SyntheticScene, traj: SplineTrajectory):
    from .render import Scene

    c, h = room_bounds(scene, traj)
    return Scene.box_room(size=tuple(2 * h), center=tuple(c), seed=scene.seed, scale=scene.texture_scale)


@dataclass
class SyntheticData:
    scene: SyntheticScene
    rig: CameraRig
    frames: list
    imu: list
    ground_truth: TrajectoryEstimate  # T_bw per frame
    landmarks: np.ndarray
    gravity: np.ndarray  # specific-force gravity vector in world axes
    trajectory: SplineTrajectory = field(repr=False, default=None)

    @property
    def gravity_in_first_body(self) -> np.ndarray:
        """Gravity expressed in the first body frame (the odometry world)."""
        return self.ground_truth.poses[0].R @ self.gravity


def imu_samples(scene: SyntheticScene, traj: SplineTrajectory, gravity, t0: float, t1: float, rng=None, rate=None) -> list:
    rate = rate or scene.imu_rate
    n = int(round((t1 - t0) * rate))
    out = []
    bg, ba = np.asarray(scene.gyro_bias, float), np.asarray(scene.accel_bias, float)
    for k in range(n + 1):
        t = t0 + k / rate
        g = traj.gyro(t) + bg
        a = traj.accel(t, gravity) + ba
        if rng is not None and scene.gyro_sigma > 0:
            g = g + rng.normal(0, scene.gyro_sigma, 3)
        if rng is not None and scene.accel_sigma > 0:
            a = a + rng.normal(0, scene.accel_sigma, 3)
        out.append(ImuSample(t, g, a))
    return out


def generate_synthetic(scene: SyntheticScene) -> SyntheticData:
    rng = np.random.default_rng(scene.seed)
    traj = SplineTrajectory(scene)
    rig = make_rig(scene)
    L = landmark_cloud(scene, traj, rng)
    tilt = np.radians(scene.gravity_tilt_deg)
    gravity = _rx(tilt) @ np.array([0.0, 0.0, 9.81])
    noise_rng = np.random.default_rng(scene.seed + 7919)
    imu_rng = np.random.default_rng(scene.seed + 104729)
    rscene = render_scene(scene, traj) if scene.render_images else None

    imu_all = imu_samples(scene, traj, gravity, 0.0, scene.duration, imu_rng)
    imu_t = np.array([s.timestamp for s in imu_all])
    frames, gt = [], TrajectoryEstimate()
    for i in range(scene.n_frames):
        t = i / scene.frame_rate
        T_bw = traj.pose(t).inverse()
        gt.append(t, T_bw)
        kps, imgs, deps = [], [], []
        for k in range(len(rig)):
            cam = rig.camera(k)
            T_cw = rig.camera_from_world(k, T_bw)
            occluded = any(c == k and a <= t <= b for c, a, b in scene.occlusions)
            Q = T_cw.apply(L)
            d = np.linalg.norm(Q, axis=1)
            front = (Q[:, 2] > 0.2) & (d < scene.max_range)
            z = np.where(front, Q[:, 2], 1.0)
            uv = np.column_stack([cam.fx * Q[:, 0] / z + cam.cx, cam.fy * Q[:, 1] / z + cam.cy])
            if scene.pixel_sigma > 0:
                uv = uv + noise_rng.normal(0, scene.pixel_sigma, uv.shape)
            vis = front & cam.in_bounds(uv, 1.0) & (not occluded)
            kps.append({int(j): (float(uv[j, 0]), float(uv[j, 1])) for j in np.flatnonzero(vis)})
            if rscene is not None:
                from .render import render

                I, D = render(cam, T_cw, rscene)
                if occluded:
                    I, D = np.zeros_like(I), np.zeros_like(D)
                if scene.depth_sigma > 0:
                    D = np.where(D > 0, D + noise_rng.normal(0, scene.depth_sigma, D.shape), 0.0)
                imgs.append(I)
                deps.append(D)
        if i > 0:
            lo = np.searchsorted(imu_t, (i - 1) / scene.frame_rate - 1e-9)
            hi = np.searchsorted(imu_t, t + 1e-9)
            imu = imu_all[lo:hi]
        else:
            imu = []
        frames.append(FrameBundle(t, imgs if rscene is not None else None, kps, deps if rscene is not None else None, imu))
    return SyntheticData(scene, rig, frames, imu_all, gt, L, gravity, traj)
