"""Per-camera 2D frontends behind one interface.

``ImageFrontend`` runs grid selection, pyramidal LK and NCC on images.
``KeypointFrontend`` consumes frames that already carry keyed pixel
observations (synthetic data or an external detector) and treats the key as
a perfect descriptor. Both hand the trackers the same Track objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend2d import (
    FeatureGridConfig,
    LKParams,
    Track,
    build_pyramid,
    extract_templates,
    lk_track_points,
    select_features,
)

PATCH_SIZE = 9


@dataclass
class FrameBundle:
    """One synchronized capture: per-camera images and/or keyed keypoints."""

    timestamp: float
    images: list | None = None  # per camera, grayscale in [0, 1]
    keypoints: list | None = None  # per camera, {key: (x, y)}
    depths: list | None = None  # per camera, meters (0 = hole)
    imu: list = field(default_factory=list)  # ImuSample since the previous bundle
    timestamps: list | None = None  # per camera capture times, for sync checks

    @property
    def n_cameras(self) -> int:
        if self.images is not None:
            return len(self.images)
        return len(self.keypoints or [])


@dataclass(frozen=True)
class PatchFeature:
    """9x9 patches, one per pyramid level, anchored at ``anchor`` (level-0 pixel)."""

    anchor: tuple
    patches: tuple
    keyframe_id: int = -1
    camera_index: int = 0

    def __post_init__(self):
        for p in self.patches:
            if np.asarray(p).shape != (PATCH_SIZE, PATCH_SIZE):
                raise ValueError("patch features are 9x9 per level")


@dataclass(frozen=True)
class KeyFeature:
    """Descriptor of the keypoint frontend: the observation key itself."""

    key: object
    keyframe_id: int = -1
    camera_index: int = 0


class ImageFrontend:
    def __init__(self, levels: int = 4, grid: FeatureGridConfig = FeatureGridConfig(), lk: LKParams = LKParams()):
        self.levels = levels
        self.grid = grid
        self.lk = lk

    def prepare(self, bundle: FrameBundle) -> list:
        if bundle.images is None:
            raise ValueError("image frontend needs images")
        return [None if img is None else build_pyramid(img, self.levels) for img in bundle.images]

    def track(self, prev, view, tracks, frame: int) -> None:
        live = [t for t in tracks if t.is_live]
        if not live:
            return
        if prev is None or view is None:
            for t in live:
                t.mark_lost()
            return
        out, ok, _ = lk_track_points(prev, view, np.array([t.position for t in live]), params=self.lk)
        for t, xy, good in zip(live, out, ok):
            if good:
                t.append(frame, xy)
            else:
                t.mark_lost()

    def select(self, view, tracks) -> list:
        if view is None:
            return []
        return [(None, xy) for xy in select_features(view, self.grid, tracks)]

    def cross(self, src_view, dst_view, tracks, seeds) -> dict:
        """``{track_id: pixel or None}`` for ``tracks`` seeded at ``seeds``."""
        if not tracks or src_view is None or dst_view is None:
            return {t.id: None for t in tracks}
        pts = np.array([t.position for t in tracks])
        out, ok, _ = lk_track_points(src_view, dst_view, pts, np.asarray(seeds, dtype=float), self.lk)
        return {t.id: (tuple(xy) if good else None) for t, xy, good in zip(tracks, out, ok)}

    def describe(self, view, pixels, keyframe_id: int, camera_index: int, keys=None) -> list:
        if view is None or len(pixels) == 0:
            return [None] * len(pixels)
        tmpl = extract_templates(view, np.asarray(pixels, dtype=float), PATCH_SIZE)
        out = []
        for i, px in enumerate(pixels):
            patches = tuple(t[i].reshape(PATCH_SIZE, PATCH_SIZE).copy() for t in tmpl)
            out.append(PatchFeature(tuple(float(v) for v in px), patches, keyframe_id, camera_index))
        return out

    def match(self, view, features, seeds) -> list:
        """Track stored patch features into ``view`` from ``seeds``; None where rejected."""
        if view is None or not features:
            return [None] * len(features)
        anchors = np.array([f.anchor for f in features], dtype=float)
        tmpl = [np.array([f.patches[lv].ravel() for f in features]) for lv in range(len(view))]
        params = LKParams(PATCH_SIZE, self.lk.max_iterations, self.lk.epsilon, self.lk.ncc_min, self.lk.min_eigenvalue)
        out, ok, _ = lk_track_points(view, view, anchors, np.asarray(seeds, dtype=float), params, templates=tmpl)
        return [tuple(xy) if good else None for xy, good in zip(out, ok)]


class KeypointFrontend:
    """Keys are stable per physical point; a key seen again re-identifies it."""

    def __init__(self):
        self.key_of: dict[int, object] = {}

    def prepare(self, bundle: FrameBundle) -> list:
        if bundle.keypoints is None:
            raise ValueError("keypoint frontend needs keyed observations")
        return [dict(kp) if kp is not None else None for kp in bundle.keypoints]

    def track(self, prev, view, tracks, frame: int) -> None:
        for t in tracks:
            if not t.is_live:
                continue
            px = None if view is None else view.get(self.key_of.get(t.id))
            if px is None:
                t.mark_lost()
            else:
                t.append(frame, px)

    def select(self, view, tracks) -> list:
        if not view:
            return []
        used = {self.key_of.get(t.id) for t in tracks if t.is_live}
        return [(k, view[k]) for k in sorted(view, key=_sort_key) if k not in used]

    def register(self, track: Track, key) -> None:
        self.key_of[track.id] = key

    def cross(self, src_view, dst_view, tracks, seeds) -> dict:
        dst_view = dst_view or {}
        return {t.id: dst_view.get(self.key_of.get(t.id)) for t in tracks}

    def describe(self, view, pixels, keyframe_id: int, camera_index: int, keys=None) -> list:
        return [KeyFeature(k, keyframe_id, camera_index) for k in keys]

    def match(self, view, features, seeds) -> list:
        view = view or {}
        return [None if f is None else view.get(f.key) for f in features]


def _sort_key(k):
    return (0, k) if isinstance(k, (int, np.integer)) else (1, str(k))
