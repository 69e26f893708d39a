"""Keypoint selection, pyramidal Lucas-Kanade tracking and the keyframe rule."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import PyramidError

# ------------------------------------------------------------------- images


def to_gray(image: np.ndarray) -> np.ndarray:
    """Float intensity plane in [0, 1]; color inputs use ITU-R 601 luma."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(float) / 255.0
    elif img.dtype == np.uint16:
        img = img.astype(float) / 65535.0
    else:
        img = img.astype(float)
    if img.ndim == 3:
        img = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return np.clip(img, 0.0, 1.0)


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear samples at float coordinates; coordinates are clamped to the image."""
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    ax = x - x0
    ay = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def bilinear_with_gradient(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear samples plus the exact derivative of the interpolant.

    Returns ``(value, d/dx, d/dy, inside)``; ``inside`` flags coordinates that
    fall within the image (no clamping was needed).
    """
    h, w = img.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(int), w - 2)
    y0 = np.minimum(np.floor(yc).astype(int), h - 2)
    ax = xc - x0
    ay = yc - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    top = i00 * (1 - ax) + i01 * ax
    bot = i10 * (1 - ax) + i11 * ax
    val = top * (1 - ay) + bot * ay
    gx = (i01 - i00) * (1 - ay) + (i11 - i10) * ay
    gy = bot - top
    return val, gx, gy, inside


@dataclass(frozen=True)
class ImagePyramid:
    """Grayscale pyramid; level 0 is full resolution, each level halves (floor)."""

    levels: tuple

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.levels[i]

    @property
    def shape(self) -> tuple:
        return self.levels[0].shape


def build_pyramid(image: np.ndarray, levels: int = 4) -> ImagePyramid:
    if levels < 1:
        raise PyramidError("need at least one pyramid level")
    img = to_gray(image)
    h, w = img.shape
    if min(h, w) < 2 ** (levels - 1):
        raise PyramidError(f"image {w}x{h} too small for {levels} levels")
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        h2, w2 = prev.shape[0] // 2, prev.shape[1] // 2
        p = prev[: 2 * h2, : 2 * w2]
        out.append(0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]))
    for lvl in out:
        lvl.flags.writeable = False
    return ImagePyramid(tuple(out))


def level_coords(xy: np.ndarray, level: int) -> np.ndarray:
    """Map level-0 pixel coordinates onto pyramid level ``level``."""
    s = 2.0**level
    return (np.asarray(xy, dtype=float) + 0.5) / s - 0.5


# ------------------------------------------------------------------ features


@dataclass(frozen=True)
class FeatureGridConfig:
    """Grid-bucketed keypoint selection.

    ``grid_n`` cells across, ``grid_m`` cells down; each cell keeps at most
    ``per_cell`` keypoints, chosen so that ``per_cell * N * M > min_total``.
    """

    grid_n: int = 8
    grid_m: int = 6
    min_total: int = 300
    min_score: float = 1e-4
    min_separation: float = 8.0
    border: int = 8

    def __post_init__(self):
        if self.grid_n < 1 or self.grid_m < 1 or self.min_total < 0:
            raise ValueError("grid dimensions must be positive")

    @property
    def per_cell(self) -> int:
        return self.min_total // (self.grid_n * self.grid_m) + 1

    def cell_of(self, xy: np.ndarray, width: int, height: int) -> np.ndarray:
        xy = np.atleast_2d(xy)
        cx = np.clip((xy[:, 0] * self.grid_n / width).astype(int), 0, self.grid_n - 1)
        cy = np.clip((xy[:, 1] * self.grid_m / height).astype(int), 0, self.grid_m - 1)
        return cy * self.grid_n + cx


def gftt_score(img: np.ndarray) -> np.ndarray:
    """Min eigenvalue of the structure tensor from 3x3 Sobel gradients summed over 3x3."""
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    a = ndimage.uniform_filter(gx * gx, 3, mode="nearest") * 9
    b = ndimage.uniform_filter(gx * gy, 3, mode="nearest") * 9
    c = ndimage.uniform_filter(gy * gy, 3, mode="nearest") * 9
    half_tr = 0.5 * (a + c)
    return half_tr - np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))


def select_features(pyr: ImagePyramid, cfg: FeatureGridConfig, existing=()) -> np.ndarray:
    """New keypoints ``(K, 2)`` as (x, y), topping each grid cell up to ``per_cell``.

    Candidates are local maxima of the Good-Features-to-Track score, ranked by
    (score desc, row, col); a candidate closer than ``min_separation`` to a live
    track or an already accepted keypoint is skipped.
    """
    img = pyr[0]
    h, w = img.shape
    score = gftt_score(img)
    b = cfg.border
    score[:b, :] = 0
    score[h - b :, :] = 0
    score[:, :b] = 0
    score[:, w - b :] = 0
    peaks = (score >= ndimage.maximum_filter(score, size=3, mode="nearest")) & (score > cfg.min_score)
    rows, cols = np.nonzero(peaks)
    if rows.size == 0:
        return np.zeros((0, 2))
    s = score[rows, cols]
    order = np.lexsort((cols, rows, -s))
    rows, cols = rows[order], cols[order]

    live = [t.position for t in existing if getattr(t, "is_live", True)]
    taken = np.array(live, dtype=float).reshape(-1, 2)
    counts = np.zeros(cfg.grid_n * cfg.grid_m, dtype=int)
    if len(taken):
        np.add.at(counts, cfg.cell_of(taken, w, h), 1)
    k = cfg.per_cell
    sep2 = cfg.min_separation**2
    accepted = []
    for r, c in zip(rows, cols):
        cell = int(cfg.cell_of(np.array([[c, r]], dtype=float), w, h)[0])
        if counts[cell] >= k:
            continue
        if len(taken) and np.min(np.sum((taken - (c, r)) ** 2, axis=1)) < sep2:
            continue
        accepted.append((float(c), float(r)))
        taken = np.vstack([taken, [[c, r]]])
        counts[cell] += 1
        if np.all(counts >= k):
            break
    return np.array(accepted, dtype=float).reshape(-1, 2)


# -------------------------------------------------------------------- tracks


class TrackStatus(enum.Enum):
    LIVE = "live"
    LOST = "lost"


@dataclass(eq=False)
class Track:
    """2D track of one feature in one camera; once lost it stays lost."""

    id: int
    camera_id: int
    positions: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    landmark_id: int | None = None
    _status: TrackStatus = TrackStatus.LIVE

    @property
    def status(self) -> TrackStatus:
        return self._status

    @property
    def is_live(self) -> bool:
        return self._status is TrackStatus.LIVE

    def mark_lost(self) -> None:
        self._status = TrackStatus.LOST

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.positions[-1], dtype=float)

    def append(self, frame: int, xy) -> None:
        if not self.is_live:
            raise ValueError(f"track {self.id} is lost")
        self.frames.append(frame)
        self.positions.append(np.asarray(xy, dtype=float))


@dataclass(frozen=True)
class LKParams:
    window: int = 11
    max_iterations: int = 10
    epsilon: float = 0.01
    ncc_min: float = 0.8
    min_eigenvalue: float = 1e-7


def ncc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-mean normalized cross-correlation along the last axis."""
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    den = np.sqrt(np.sum(a * a, axis=-1) * np.sum(b * b, axis=-1))
    num = np.sum(a * b, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)
    return out


def _gradients(img: np.ndarray):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return gx, gy


def lk_track_points(
    src: ImagePyramid,
    dst: ImagePyramid,
    points: np.ndarray,
    guesses: np.ndarray | None = None,
    params: LKParams = LKParams(),
    templates: list | None = None,
):
    """Coarse-to-fine inverse-compositional translational LK.

    ``points`` are level-0 (x, y) positions in ``src``; ``guesses`` seed the
    destination positions (defaults to the source positions). ``templates``
    optionally replaces the per-level source patches (one ``(N, win*win)``
    array per level), as used for stored patch features.
    Returns ``(positions, ok, ncc_scores)``.
    """
    if len(src) != len(dst):
        raise PyramidError("pyramids must have equal level counts")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, bool), np.zeros(0)
    disp = np.zeros((n, 2)) if guesses is None else np.atleast_2d(guesses).astype(float) - pts
    ok = np.ones(n, dtype=bool)
    scores = np.ones(n)
    half = params.window // 2
    oy, ox = np.mgrid[-half : half + 1, -half : half + 1]
    ox = ox.ravel().astype(float)
    oy = oy.ravel().astype(float)

    for level in range(len(src) - 1, -1, -1):
        s = 2.0**level
        simg, dimg = src[level], dst[level]
        p = level_coords(pts, level)
        tx = p[:, :1] + ox
        ty = p[:, 1:] + oy
        if templates is None:
            tmpl = bilinear(simg, tx, ty)
            gx_img, gy_img = _gradients(simg)
            gx = bilinear(gx_img, tx, ty)
            gy = bilinear(gy_img, tx, ty)
        else:
            tmpl = templates[level]
            g = tmpl.reshape(n, params.window, params.window)
            gx = np.zeros_like(g)
            gy = np.zeros_like(g)
            gx[:, :, 1:-1] = 0.5 * (g[:, :, 2:] - g[:, :, :-2])
            gy[:, 1:-1, :] = 0.5 * (g[:, 2:, :] - g[:, :-2, :])
            gx = gx.reshape(n, -1)
            gy = gy.reshape(n, -1)
        hxx = np.sum(gx * gx, axis=1)
        hxy = np.sum(gx * gy, axis=1)
        hyy = np.sum(gy * gy, axis=1)
        det = hxx * hyy - hxy * hxy
        tr = hxx + hyy
        lam_min = 0.5 * tr - np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
        ok &= lam_min > params.min_eigenvalue
        safe_det = np.where(np.abs(det) > 0, det, 1.0)

        d = disp / s
        active = ok.copy()
        for _ in range(params.max_iterations):
            if not active.any():
                break
            cur = bilinear(dimg, tx[active] + d[active, :1], ty[active] + d[active, 1:])
            e = cur - tmpl[active]
            bx = np.sum(gx[active] * e, axis=1)
            by = np.sum(gy[active] * e, axis=1)
            dd = safe_det[active]
            stepx = (hyy[active] * bx - hxy[active] * by) / dd
            stepy = (hxx[active] * by - hxy[active] * bx) / dd
            idx = np.nonzero(active)[0]
            d[idx, 0] -= stepx
            d[idx, 1] -= stepy
            done = np.hypot(stepx, stepy) < params.epsilon
            active[idx[done]] = False
        disp = d * s

        cur = bilinear(dimg, tx + d[:, :1], ty + d[:, 1:])
        scores = ncc(tmpl, cur)
        ok &= scores >= params.ncc_min

    out = pts + disp
    h, w = dst[0].shape
    inb = (
        (out[:, 0] >= half)
        & (out[:, 0] <= w - 1 - half)
        & (out[:, 1] >= half)
        & (out[:, 1] <= h - 1 - half)
    )
    ok &= inb & np.all(np.isfinite(out), axis=1)
    return out, ok, scores


def extract_templates(pyr: ImagePyramid, points: np.ndarray, window: int) -> list:
    """Per-level ``(N, window*window)`` patches centered on ``points``."""
    half = window // 2
    oy, ox = np.mgrid[-half : half + 1, -half : half + 1]
    out = []
    for level in range(len(pyr)):
        p = level_coords(np.atleast_2d(points), level)
        out.append(bilinear(pyr[level], p[:, :1] + ox.ravel(), p[:, 1:] + oy.ravel()))
    return out


def track_lk(prev: ImagePyramid, curr: ImagePyramid, tracks, params: LKParams = LKParams(), frame: int | None = None):
    """Advance every live track from ``prev`` into ``curr``; failures mark tracks lost."""
    live = [t for t in tracks if t.is_live]
    if live:
        pts = np.array([t.position for t in live])
        out, ok, _ = lk_track_points(prev, curr, pts, params=params)
        for t, xy, good in zip(live, out, ok):
            if good:
                t.append(frame if frame is not None else (t.frames[-1] + 1 if t.frames else 0), xy)
            else:
                t.mark_lost()
    return list(tracks)


def cross_camera_track(src: ImagePyramid, dst: ImagePyramid, tracks, epipolar_hint=None, params: LKParams = LKParams()) -> dict:
    """Match live tracks of ``src`` into a synchronized ``dst`` image.

    ``epipolar_hint`` shifts the seed: a scalar disparity (seed = x - d), a
    2-vector offset, or an ``(N, 2)`` array of seeds offsets. Returns
    ``{track_id: (x, y) or None}``.
    """
    live = [t for t in tracks if t.is_live]
    if not live:
        return {}
    pts = np.array([t.position for t in live])
    if epipolar_hint is None:
        guesses = pts
    else:
        hint = np.asarray(epipolar_hint, dtype=float)
        if hint.ndim == 0:
            guesses = pts - np.array([float(hint), 0.0])
        else:
            guesses = pts + hint
    out, ok, _ = lk_track_points(src, dst, pts, guesses, params)
    return {t.id: (tuple(xy) if good else None) for t, xy, good in zip(live, out, ok)}


# ----------------------------------------------------------------- keyframes


@dataclass(frozen=True)
class KeyframePolicy:
    survival_threshold: float = 0.7

    def __post_init__(self):
        if not 0 < self.survival_threshold < 1:
            raise ValueError("survival threshold must lie in (0, 1)")


def keyframe_due(s_curr, s_kf, policy: KeyframePolicy = KeyframePolicy()) -> bool:
    """True iff ``|S_curr & S_kf| / |S_kf|`` is strictly below the threshold."""
    s_kf = set(s_kf)
    if not s_kf:
        raise ValueError("keyframe track set is empty; bootstrap the first keyframe explicitly")
    return len(set(s_curr) & s_kf) / len(s_kf) < policy.survival_threshold
