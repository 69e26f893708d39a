"""Ray-cast renderer for planar textured scenes.

Images are point-sampled from a continuous procedural texture, so a rendered
view is exact for any camera pose: warps, stereo shifts and depth maps can be
checked against closed-form geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraModel, RigidTransform

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1) (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        h = i.astype(np.int64).astype(np.uint64) * _M1
        h ^= j.astype(np.int64).astype(np.uint64) * _M2 + np.uint64(seed & 0xFFFFFFFF) * _M3
        h ^= h >> np.uint64(30)
        h *= _M2
        h ^= h >> np.uint64(27)
        h *= _M3
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (6 * t - 15) + 10)


def value_noise(u: np.ndarray, v: np.ndarray, seed: int = 0, octaves: int = 4) -> np.ndarray:
    """Smooth (C2) multi-octave value noise in [0, 1] over the infinite plane."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    total = np.zeros(np.broadcast(u, v).shape)
    amp_sum = 0.0
    for o in range(octaves):
        f = 2.0**o
        amp = 0.55**o
        uu, vv = u * f, v * f
        i0 = np.floor(uu)
        j0 = np.floor(vv)
        fu = _fade(uu - i0)
        fv = _fade(vv - j0)
        s = seed * 131 + o
        a = _hash01(i0, j0, s)
        b = _hash01(i0 + 1, j0, s)
        c = _hash01(i0, j0 + 1, s)
        d = _hash01(i0 + 1, j0 + 1, s)
        total += amp * ((a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv)
        amp_sum += amp
    return total / amp_sum


def texture_image(width: int, height: int, seed: int = 0, scale: float = 8.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Textured test image; ``shift`` translates the content by (dx, dy) pixels."""
    y, x = np.mgrid[0:height, 0:width].astype(float)
    val = value_noise((x - shift[0]) / scale, (y - shift[1]) / scale, seed)
    return 0.1 + 0.8 * val


@dataclass(frozen=True)
class TexturedPlane:
    """Rectangle ``origin + a*axis_u + b*axis_v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    origin: tuple
    axis_u: tuple
    axis_v: tuple
    half_u: float = np.inf
    half_v: float = np.inf
    seed: int = 0
    scale: float = 0.25

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)

    def intensity(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return 0.1 + 0.8 * value_noise(a / self.scale, b / self.scale, self.seed)


@dataclass(frozen=True)
class Scene:
    planes: tuple = field(default_factory=tuple)

    @classmethod
    def box_room(cls, size=(10.0, 10.0, 4.0), center=(0.0, 0.0, 1.0), seed: int = 0, scale: float = 0.25) -> "Scene":
        """Axis-aligned room; walls face inward. ``center`` is the room's centroid."""
        sx, sy, sz = (s / 2 for s in size)
        c = np.asarray(center, dtype=float)
        ex, ey, ez = np.eye(3)
        planes = [
            TexturedPlane(tuple(c + sx * ex), tuple(ey), tuple(ez), sy, sz, seed + 1, scale),
            TexturedPlane(tuple(c - sx * ex), tuple(ey), tuple(ez), sy, sz, seed + 2, scale),
            TexturedPlane(tuple(c + sy * ey), tuple(ex), tuple(ez), sx, sz, seed + 3, scale),
            TexturedPlane(tuple(c - sy * ey), tuple(ex), tuple(ez), sx, sz, seed + 4, scale),
            TexturedPlane(tuple(c + sz * ez), tuple(ex), tuple(ey), sx, sy, seed + 5, scale),
            TexturedPlane(tuple(c - sz * ez), tuple(ex), tuple(ey), sx, sy, seed + 6, scale),
        ]
        return cls(tuple(planes))

    def with_plane(self, plane: TexturedPlane) -> "Scene":
        return Scene(self.planes + (plane,))

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit per ray: ``(t, intensity)``; misses give ``t = inf``."""
        n = dirs.shape[0]
        best = np.full(n, np.inf)
        inten = np.zeros(n)
        for pl in self.planes:
            o = np.asarray(pl.origin, dtype=float)
            nrm = pl.normal
            den = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((o - origins) @ nrm) / den
            hit_pts = origins + t[:, None] * dirs
            a = (hit_pts - o) @ np.asarray(pl.axis_u, dtype=float)
            b = (hit_pts - o) @ np.asarray(pl.axis_v, dtype=float)
            ok = (np.abs(den) > 1e-12) & (t > 1e-9) & (np.abs(a) <= pl.half_u) & (np.abs(b) <= pl.half_v) & (t < best)
            if ok.any():
                best[ok] = t[ok]
                inten[ok] = pl.intensity(a[ok], b[ok])
        return best, inten


def render(cam: CameraModel, T_cw: RigidTransform, scene: Scene):
    """Render ``(intensity, depth)`` images; depth is camera z, 0 where nothing is hit."""
    v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
    rays_c = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    T_wc = T_cw.inverse()
    dirs = rays_c @ T_wc.R.T
    origins = np.broadcast_to(T_wc.t, dirs.shape)
    t, inten = scene.raycast(origins, dirs)
    depth = np.where(np.isfinite(t), t, 0.0)
    return inten.reshape(cam.height, cam.width), depth.reshape(cam.height, cam.width)


def point_visible(scene: Scene, cam_center_w: np.ndarray, points_w: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """True where the segment from the camera center to each point is unobstructed."""
    d = points_w - cam_center_w
    dist = np.linalg.norm(d, axis=1)
    t, _ = scene.raycast(np.broadcast_to(cam_center_w, d.shape), d / dist[:, None])
    return t >= dist - tol * np.maximum(dist, 1.0) - 1e-6
