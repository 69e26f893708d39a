"""Sliding-window odometry map: keyframes, landmarks, observations."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, DuplicateIdError, OutOfOrderError
from .geometry import DEPTH_EPS, CameraRig, NoiseModel, RigidTransform, projection_jacobian

MIN_PARALLAX_DEG = 0.5


@dataclass(frozen=True)
class Observation:
    landmark_id: int
    keyframe_id: int
    camera_index: int
    pixel: tuple
    noise: NoiseModel | None = None


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray
    track_id: int | None = None

    def moved(self, position) -> "Landmark":
        return replace(self, position=np.asarray(position, dtype=float))


@dataclass(frozen=True)
class Keyframe:
    id: int
    timestamp: float
    pose: RigidTransform  # T_bw, base-from-world


def triangulate(rays: Sequence[tuple], min_parallax_deg: float = MIN_PARALLAX_DEG) -> np.ndarray:
    """Landmark position from ``(T_cw, CameraModel, pixel)`` rays.

    Linear DLT on normalized coordinates, then one Gauss-Newton step on the
    summed squared reprojection error.
    """
    if len(rays) < 2:
        raise DegenerateGeometryError("triangulation needs at least two rays")
    centers = []
    dirs = []
    A = []
    for T_cw, cam, px in rays:
        xn = (px[0] - cam.cx) / cam.fx
        yn = (px[1] - cam.cy) / cam.fy
        P = np.hstack([T_cw.R, T_cw.t[:, None]])
        A.append(xn * P[2] - P[0])
        A.append(yn * P[2] - P[1])
        centers.append(-(T_cw.R.T @ T_cw.t))
        d = T_cw.R.T @ np.array([xn, yn, 1.0])
        dirs.append(d / np.linalg.norm(d))
    centers = np.array(centers)
    dirs = np.array(dirs)
    spread = np.max(np.linalg.norm(centers - centers[0], axis=1))
    if spread < 1e-9:
        raise DegenerateGeometryError("camera centers coincide")
    cosines = np.clip(dirs @ dirs.T, -1.0, 1.0)
    max_angle = np.degrees(np.arccos(np.min(cosines)))
    if max_angle < min_parallax_deg:
        raise DegenerateGeometryError(f"triangulation angle {max_angle:.3f} deg below {min_parallax_deg}")
    _, _, vt = np.linalg.svd(np.array(A))
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise DegenerateGeometryError("point at infinity")
    p = X[:3] / X[3]

    # one Gauss-Newton refinement
    H = np.zeros((3, 3))
    g = np.zeros(3)
    for T_cw, cam, px in rays:
        pc = T_cw.apply(p)
        if pc[2] <= DEPTH_EPS:
            raise BehindCameraError("triangulated point is behind an observing camera")
        r = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy]) - px
        J = projection_jacobian(cam, pc[None])[0] @ T_cw.R
        H += J.T @ J
        g += J.T @ r
    try:
        p = p - np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("singular refinement system") from exc
    for T_cw, _, _ in rays:
        if T_cw.apply(p)[2] <= DEPTH_EPS:
            raise BehindCameraError("triangulated point is behind an observing camera")
    if not np.all(np.isfinite(p)):
        raise DegenerateGeometryError("non-finite triangulation")
    return p


def reprojection_error(rays, p) -> np.ndarray:
    out = []
    for T_cw, cam, px in rays:
        pc = T_cw.apply(p)
        out.append(np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy]) - px)
    return np.array(out)


@dataclass
class MapSnapshot:
    """Immutable-by-convention copy of the optimizable part of a LocalMap."""

    rig: CameraRig
    poses: dict
    landmarks: dict
    observations: tuple
    fixed: frozenset = frozenset()


class LocalMap:
    """Window of the last ``max_keyframes`` keyframes with their landmarks.

    Single writer. ``snapshot()`` hands optimizers a detached copy and
    ``merge()`` writes refined values back by id (last write wins, ids that
    left the window are ignored).
    """

    def __init__(self, rig: CameraRig, max_keyframes: int = 10):
        if max_keyframes < 1:
            raise ValueError("window must hold at least one keyframe")
        self.rig = rig
        self.max_keyframes = max_keyframes
        self.keyframes: "OrderedDict[int, Keyframe]" = OrderedDict()
        self.landmarks: dict[int, Landmark] = {}
        # (keyframe_id, landmark_id, camera_index) -> Observation
        self.observations: dict[tuple, Observation] = {}
        self._by_landmark: dict[int, set] = {}
        self._by_keyframe: dict[int, set] = {}
        self.track_to_landmark: dict[int, int] = {}
        self.evicted: list[int] = []

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def newest(self) -> Keyframe | None:
        return next(reversed(self.keyframes.values())) if self.keyframes else None

    def observations_of(self, landmark_id: int) -> list:
        return [self.observations[k] for k in sorted(self._by_landmark.get(landmark_id, ()))]

    def observations_of_keyframe(self, keyframe_id: int) -> list:
        return [self.observations[k] for k in sorted(self._by_keyframe.get(keyframe_id, ()), key=lambda k: (k[1], k[2]))]

    def add_observation(self, obs: Observation) -> None:
        if obs.keyframe_id not in self.keyframes:
            raise KeyError(f"unknown keyframe {obs.keyframe_id}")
        if obs.landmark_id not in self.landmarks:
            raise KeyError(f"unknown landmark {obs.landmark_id}")
        if not 0 <= obs.camera_index < len(self.rig):
            raise ValueError(f"camera index {obs.camera_index} outside rig")
        if not self.rig.camera(obs.camera_index).in_bounds(np.asarray(obs.pixel)):
            raise ValueError("observation pixel outside camera bounds")
        key = (obs.keyframe_id, obs.landmark_id, obs.camera_index)
        self.observations[key] = obs
        self._by_landmark.setdefault(obs.landmark_id, set()).add(key)
        self._by_keyframe.setdefault(obs.keyframe_id, set()).add(key)

    def _drop_observation(self, key) -> None:
        self.observations.pop(key, None)
        self._by_landmark.get(key[1], set()).discard(key)
        self._by_keyframe.get(key[0], set()).discard(key)

    def remove_landmark(self, landmark_id: int) -> None:
        for key in list(self._by_landmark.pop(landmark_id, ())):
            self._drop_observation(key)
        lm = self.landmarks.pop(landmark_id, None)
        if lm is not None and lm.track_id is not None and self.track_to_landmark.get(lm.track_id) == landmark_id:
            del self.track_to_landmark[lm.track_id]

    def insert_keyframe(self, keyframe: Keyframe, new_landmarks: Iterable[Landmark] = (), observations: Iterable[Observation] = ()) -> "LocalMap":
        if keyframe.id in self.keyframes:
            raise DuplicateIdError(f"keyframe {keyframe.id} already in map")
        if self.keyframes and keyframe.id <= max(self.keyframes):
            raise OutOfOrderError(f"keyframe id {keyframe.id} not greater than existing ids")
        self.keyframes[keyframe.id] = keyframe
        self._by_keyframe.setdefault(keyframe.id, set())
        for lm in new_landmarks:
            if lm.id in self.landmarks:
                raise DuplicateIdError(f"landmark {lm.id} already in map")
            if not np.all(np.isfinite(lm.position)):
                raise ValueError("landmark position must be finite")
            self.landmarks[lm.id] = lm
            if lm.track_id is not None:
                self.track_to_landmark[lm.track_id] = lm.id
        for obs in observations:
            self.add_observation(obs)
        while len(self.keyframes) > self.max_keyframes:
            self._evict_oldest()
        self._prune()
        return self

    def _evict_oldest(self) -> None:
        kf_id, _ = self.keyframes.popitem(last=False)
        for key in list(self._by_keyframe.pop(kf_id, ())):
            self._drop_observation(key)
        self.evicted.append(kf_id)

    def _prune(self) -> None:
        for lm_id in [l for l in self.landmarks if len(self._by_landmark.get(l, ())) < 2]:
            # freshly created landmarks always arrive with two observations;
            # anything below that lost its support to eviction
            self.remove_landmark(lm_id)

    def landmarks_for_tracks(self, tracks) -> list:
        """``(Landmark, latest Observation)`` pairs for live tracks, sorted by landmark id.

        ``tracks`` may be Track objects or bare track ids (treated as live).
        """
        out = []
        for t in tracks:
            tid = t if isinstance(t, (int, np.integer)) else t.id
            if not isinstance(t, (int, np.integer)) and not t.is_live:
                continue
            lm_id = self.track_to_landmark.get(tid)
            if lm_id is None or lm_id not in self.landmarks:
                continue
            obs = self.observations_of(lm_id)
            latest = max(obs, key=lambda o: (o.keyframe_id, -o.camera_index)) if obs else None
            out.append((self.landmarks[lm_id], latest))
        out.sort(key=lambda pair: pair[0].id)
        return out

    def link_track(self, track_id: int, landmark_id: int) -> None:
        self.track_to_landmark[track_id] = landmark_id

    def check_invariants(self) -> None:
        assert len(self.keyframes) <= self.max_keyframes
        ids = list(self.keyframes)
        assert ids == sorted(ids) and len(set(ids)) == len(ids)
        for (kf, lm, k), obs in self.observations.items():
            assert kf in self.keyframes and lm in self.landmarks
            assert 0 <= k < len(self.rig)
        for lm_id, lm in self.landmarks.items():
            assert len(self._by_landmark.get(lm_id, ())) >= 2
            assert np.all(np.isfinite(lm.position))

    def snapshot(self) -> MapSnapshot:
        oldest = next(iter(self.keyframes)) if self.keyframes else None
        return MapSnapshot(
            rig=self.rig,
            poses={k: kf.pose for k, kf in self.keyframes.items()},
            landmarks={k: np.array(lm.position) for k, lm in self.landmarks.items()},
            observations=tuple(self.observations.values()),
            fixed=frozenset([] if oldest is None else [oldest]),
        )

    def merge(self, poses: dict, landmarks: dict) -> None:
        for k, pose in poses.items():
            if k in self.keyframes:
                self.keyframes[k] = replace(self.keyframes[k], pose=pose)
        for k, pos in landmarks.items():
            if k in self.landmarks:
                self.landmarks[k] = self.landmarks[k].moved(pos)


def insert_keyframe(local_map: LocalMap, keyframe: Keyframe, new_landmarks=(), observations=()) -> LocalMap:
    return local_map.insert_keyframe(keyframe, new_landmarks, observations)


def landmarks_for_tracks(local_map: LocalMap, tracks) -> list:
    return local_map.landmarks_for_tracks(tracks)
