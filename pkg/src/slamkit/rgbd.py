"""Dense RGB-D frame-to-frame alignment.

Residual families, all functions of the relative pose ``T_21`` (frame 2 from
frame 1, perturbed on the left):

* photometric: ``I_2(tau(T, x)) - I_1(x)`` and the mirrored ``I_1(tau(T^-1, x)) - I_2(x)``
* geometric:   ``Z_2(tau(T, x)) - [T pi^-1(x, Z_1(x))]_z`` and its mirror
* point-to-point on 2D-2D matches: ``pi^-1(y, Z_2(y)) - T pi^-1(x, Z_1(x))``
* optional reprojection of map points (given in frame-1 coordinates)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, NoConvergenceError
from .frontend2d import bilinear_with_gradient, build_pyramid, to_gray
from .geometry import DEPTH_EPS, CameraModel, NoiseModel, RigidTransform, se3_exp, skew_batch
from .solvers import LmSettings, levenberg_marquardt

SIGMA_I = 0.01
DEPTH_SIGMA_COEFF = 0.01
SIGMA_P = 0.01


@dataclass(frozen=True)
class DepthImage:
    depth: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_array(cls, depth) -> "DepthImage":
        d = np.asarray(depth, dtype=float)
        valid = np.isfinite(d) & (d > 0)
        return cls(np.where(valid, d, 0.0), valid)

    @property
    def shape(self):
        return self.depth.shape

    def downsample(self) -> "DepthImage":
        """2x2 mean; a coarse pixel is valid only when all four children are."""
        h, w = (self.shape[0] // 2) * 2, (self.shape[1] // 2) * 2
        d = self.depth[:h, :w].reshape(h // 2, 2, w // 2, 2)
        v = self.valid[:h, :w].reshape(h // 2, 2, w // 2, 2)
        ok = v.all(axis=(1, 3))
        return DepthImage(np.where(ok, d.mean(axis=(1, 3)), 0.0), ok)


def depth_pyramid(z: DepthImage, levels: int) -> list:
    out = [z]
    for _ in range(levels - 1):
        out.append(out[-1].downsample())
    return out


def sample_depth(z: DepthImage, x, y):
    """Bilinear depth with gradient; ``ok`` needs all four neighbours valid."""
    val, gx, gy, inside = bilinear_with_gradient(z.depth, x, y)
    h, w = z.shape
    x0 = np.clip(np.floor(np.clip(x, 0, w - 1)).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(np.clip(y, 0, h - 1)).astype(int), 0, h - 2)
    v = z.valid
    ok = inside & v[y0, x0] & v[y0, x0 + 1] & v[y0 + 1, x0] & v[y0 + 1, x0 + 1]
    return val, gx, gy, ok


@dataclass(frozen=True)
class DensePixelSet:
    level: int
    xy: np.ndarray  # (N, 2) pixel coordinates at that level

    def __len__(self):
        return len(self.xy)


def select_dense_pixels(I1, I2, Z1: DepthImage, Z2: DepthImage, threshold: float = 0.02, budget: int = 3000,
                        grid=(8, 6), level: int = 0, border: int = 2) -> DensePixelSet:
    """High-gradient pixels valid in at least one depth map, capped per grid cell."""
    g = np.zeros_like(I1)
    for img in (I1, I2):
        gy, gx = np.gradient(img)
        g = np.maximum(g, np.hypot(gx, gy))
    h, w = I1.shape
    mask = (g > threshold) & (Z1.valid | Z2.valid)
    mask[:border] = mask[-border:] = False
    mask[:, :border] = mask[:, -border:] = False
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return DensePixelSet(level, np.zeros((0, 2)))
    order = np.lexsort((cols, rows, -g[rows, cols]))
    rows, cols = rows[order], cols[order]
    n, m = grid
    cell = np.minimum(cols * n // w, n - 1) + n * np.minimum(rows * m // h, m - 1)
    per_cell = budget // (n * m) + 1
    rank = np.zeros(len(cell), dtype=int)
    seen = {}
    for i, c in enumerate(cell):
        rank[i] = seen.get(c, 0)
        seen[c] = rank[i] + 1
    keep = rank < per_cell
    xy = np.column_stack([cols[keep], rows[keep]]).astype(float)
    return DensePixelSet(level, xy[:budget])


# ------------------------------------------------------------------ warping


def warp(T: RigidTransform, cam: CameraModel, px, depth):
    """``tau(T, x)``: lift with depth, transform, project.

    Returns ``(pixels, valid, points)``; invalid where the depth is not
    positive, the point lands behind the camera or outside the image.
    """
    px = np.atleast_2d(np.asarray(px, dtype=float))
    depth = np.atleast_1d(np.asarray(depth, dtype=float))
    ok = np.isfinite(depth) & (depth > 0)
    d = np.where(ok, depth, 1.0)
    P = np.column_stack([(px[:, 0] - cam.cx) / cam.fx * d, (px[:, 1] - cam.cy) / cam.fy * d, d])
    Q = T.apply(P)
    front = Q[:, 2] > DEPTH_EPS
    z = np.where(front, Q[:, 2], 1.0)
    uv = np.column_stack([cam.fx * Q[:, 0] / z + cam.cx, cam.fy * Q[:, 1] / z + cam.cy])
    valid = ok & front & cam.in_bounds(uv)
    return uv, valid, Q


def _proj_jac(cam, Q):
    iz = 1.0 / Q[:, 2]
    J = np.zeros((len(Q), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * Q[:, 0] * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * Q[:, 1] * iz * iz
    return J


def _direction(Ia, Za, Ib, Zb: DepthImage, T: RigidTransform, inverse: bool, cam, xy, sigma_I, depth_coeff, active=None):
    """One row of the symmetric pair: lift ``xy`` with ``Za``, warp into ``b``.

    ``T`` is always ``T_21``; ``inverse`` selects the mirrored (2 -> 1) row.
    """
    Tw = T.inverse() if inverse else T
    za, _, _, oka = sample_depth(Za, xy[:, 0], xy[:, 1])
    ia = Ia[xy[:, 1].astype(int), xy[:, 0].astype(int)]
    uv, valid, Q = warp(Tw, cam, xy, np.where(oka, za, np.nan))
    ib, gix, giy, inb = bilinear_with_gradient(Ib, uv[:, 0], uv[:, 1])
    zb, gzx, gzy, okb = sample_depth(Zb, uv[:, 0], uv[:, 1])
    valid = valid & inb & okb & oka
    if active is not None:
        valid = active
    sz = depth_coeff * np.where(oka, za, 1.0) ** 2
    rI = (ib - ia) / sigma_I
    rZ = (zb - Q[:, 2]) / sz
    Jp = _proj_jac(cam, np.where(Q[:, 2:3] > DEPTH_EPS, Q, 1.0))
    if inverse:
        # q = T^-1 exp(-d) p  ->  dq/dd = R^T [ [p]x, -I ]
        P = T.apply(Q)
        dq = np.einsum("ij,fjk->fik", T.R.T, np.concatenate([skew_batch(P), -np.broadcast_to(np.eye(3), (len(P), 3, 3))], axis=2))
    else:
        dq = np.concatenate([-skew_batch(Q), np.broadcast_to(np.eye(3), (len(Q), 3, 3))], axis=2)
    gI = np.stack([gix, giy], axis=1)
    gZ = np.stack([gzx, gzy], axis=1)
    JI = np.einsum("fi,fij,fjk->fk", gI, Jp, dq) / sigma_I
    JZ = (np.einsum("fi,fij,fjk->fk", gZ, Jp, dq) - dq[:, 2, :]) / sz[:, None]
    return rI, rZ, JI, JZ, valid


def dense_residuals(I1, Z1: DepthImage, I2, Z2: DepthImage, T: RigidTransform, cam: CameraModel, pixels: DensePixelSet,
                    sigma_I: float = SIGMA_I, depth_coeff: float = DEPTH_SIGMA_COEFF, active=None):
    """Whitened photometric and depth residuals of both warp directions.

    Returns ``(r, J, mask)``. ``r`` stacks, for every valid pixel of the
    forward and then the backward direction, ``[r_I, r_Z]``. The depth
    residual is divided by ``sigma_z = depth_coeff * Z^2`` of the lifted pixel.
    With ``active`` (a mask from an earlier call) the same rows are emitted.
    """
    xy = pixels.xy
    act_f = act_b = None
    if active is not None:
        act_f, act_b = active[: len(xy)], active[len(xy) :]
    f = _direction(I1, Z1, I2, Z2, T, False, cam, xy, sigma_I, depth_coeff, act_f)
    b = _direction(I2, Z2, I1, Z1, T, True, cam, xy, sigma_I, depth_coeff, act_b)
    rs, Js = [], []
    for rI, rZ, JI, JZ, valid in (f, b):
        rs.append(np.column_stack([rI[valid], rZ[valid]]).ravel())
        Js.append(np.stack([JI[valid], JZ[valid]], axis=1).reshape(-1, 6))
    mask = np.concatenate([f[4], b[4]])
    return np.concatenate(rs), np.vstack(Js), mask


def _lift(cam, xy, z):
    return np.column_stack([(xy[:, 0] - cam.cx) / cam.fx * z, (xy[:, 1] - cam.cy) / cam.fy * z, z])


def point_to_point_residuals(matches, Z1: DepthImage, Z2: DepthImage, T: RigidTransform, cam: CameraModel,
                             sigma_p: float = SIGMA_P):
    """``(r, J, mask)``; one 3-vector per match with valid depth at both ends, divided by ``sigma_p``."""
    if matches is None or len(matches) == 0:
        return np.zeros(0), np.zeros((0, 6)), np.zeros(0, dtype=bool)
    m = np.asarray(matches, dtype=float).reshape(-1, 4)
    x, y = m[:, :2], m[:, 2:]
    z1, _, _, ok1 = sample_depth(Z1, x[:, 0], x[:, 1])
    z2, _, _, ok2 = sample_depth(Z2, y[:, 0], y[:, 1])
    ok = ok1 & ok2
    P1 = _lift(cam, x[ok], z1[ok])
    P2 = _lift(cam, y[ok], z2[ok])
    Q = T.apply(P1)
    r = (P2 - Q) / sigma_p
    J = -np.concatenate([-skew_batch(Q), np.broadcast_to(np.eye(3), (len(Q), 3, 3))], axis=2) / sigma_p
    return r.ravel(), J.reshape(-1, 6), ok


def map_residuals(map_factors, T: RigidTransform, cam: CameraModel, noise: NoiseModel | None = None):
    """Reprojection into frame 2 of points given in frame-1 coordinates."""
    if not map_factors:
        return np.zeros(0), np.zeros((0, 6))
    P = np.array([p for p, _ in map_factors], dtype=float)
    o = np.array([px for _, px in map_factors], dtype=float)
    L = np.eye(2) if noise is None else noise.sqrt_information(2)
    Q = T.apply(P)
    z = np.where(Q[:, 2] > DEPTH_EPS, Q[:, 2], np.nan)
    uv = np.column_stack([cam.fx * Q[:, 0] / z + cam.cx, cam.fy * Q[:, 1] / z + cam.cy])
    dq = np.concatenate([-skew_batch(Q), np.broadcast_to(np.eye(3), (len(Q), 3, 3))], axis=2)
    J = np.einsum("ij,fjk,fkl->fil", L, _proj_jac(cam, np.where(Q[:, 2:3] > DEPTH_EPS, Q, 1.0)), dq)
    return ((uv - o) @ L.T).ravel(), J.reshape(-1, 6)


@dataclass
class RgbdResult:
    pose: RigidTransform
    initial_cost: float
    cost: float
    levels: list


def _prepare(I):
    return to_gray(np.asarray(I))


def solve_rgbd(
    I1, Z1, I2, Z2, cam: CameraModel,
    matches=None,
    map_factors: Sequence = (),
    init: RigidTransform = RigidTransform.identity(),
    levels: int = 4,
    dense: bool = True,
    sigma_I: float = SIGMA_I,
    depth_coeff: float = DEPTH_SIGMA_COEFF,
    sigma_p: float = SIGMA_P,
    pixel_noise: NoiseModel | None = None,
    grad_threshold: float = 0.02,
    budget: int = 3000,
    settings: LmSettings = LmSettings(),
    huber: float | None = None,
) -> RgbdResult:
    """Estimate ``T_21`` coarse to fine over the combined objective.

    ``matches`` are ``(x1, y1, x2, y2)`` rows at full resolution;
    ``map_factors`` are ``(p_in_frame1, pixel_in_frame2)`` pairs.
    ``dense=False`` keeps only the sparse families.
    """
    Z1 = Z1 if isinstance(Z1, DepthImage) else DepthImage.from_array(Z1)
    Z2 = Z2 if isinstance(Z2, DepthImage) else DepthImage.from_array(Z2)
    I1 = _prepare(I1)
    I2 = _prepare(I2)
    n_lv = max(1, levels) if dense else 1
    while n_lv > 1 and min(I1.shape) >> (n_lv - 1) < 16:
        n_lv -= 1
    P1, P2 = build_pyramid(I1, n_lv), build_pyramid(I2, n_lv)
    D1, D2 = depth_pyramid(Z1, n_lv), depth_pyramid(Z2, n_lv)

    T = init
    level_costs = []
    initial = None
    for L in reversed(range(n_lv)):
        camL = cam.at_level(L)
        pix = select_dense_pixels(P1[L], P2[L], D1[L], D2[L], grad_threshold, budget, level=L) if dense else None
        active = None
        if dense:
            _, _, active = dense_residuals(P1[L], D1[L], P2[L], D2[L], T, camL, pix, sigma_I, depth_coeff)

        def fun(Tc):
            parts = []
            if dense:
                parts.append(dense_residuals(P1[L], D1[L], P2[L], D2[L], Tc, camL, pix, sigma_I, depth_coeff, active)[0])
            parts.append(point_to_point_residuals(matches, Z1, Z2, Tc, cam, sigma_p)[0])
            parts.append(map_residuals(map_factors, Tc, cam, pixel_noise)[0])
            return np.concatenate(parts)

        def jac(Tc):
            parts = []
            if dense:
                parts.append(dense_residuals(P1[L], D1[L], P2[L], D2[L], Tc, camL, pix, sigma_I, depth_coeff, active)[1])
            parts.append(point_to_point_residuals(matches, Z1, Z2, Tc, cam, sigma_p)[1])
            parts.append(map_residuals(map_factors, Tc, cam, pixel_noise)[1])
            return np.vstack(parts)

        r0 = fun(T)
        if r0.size == 0:
            if L == 0 and initial is None:
                raise InsufficientDataError("no valid dense, point-to-point or map residual")
            continue
        T, report = levenberg_marquardt(fun, T, settings, jac=jac, retract=lambda T, d: se3_exp(d) @ T,
                                        huber_delta=huber)
        if initial is None:
            initial = report.initial_cost
        if not np.isfinite(report.cost):
            raise NoConvergenceError("dense alignment diverged")
        level_costs.append((L, report.initial_cost, report.cost, report.iterations))
    if initial is None:
        raise InsufficientDataError("no valid residual at any level")
    return RgbdResult(T, initial, level_costs[-1][2], level_costs)


def rgbd_objective(I1, Z1, I2, Z2, cam, T, matches=None, map_factors=(), dense=True, **kw) -> float:
    """Full-resolution combined objective ``0.5 * |r|^2`` with validity evaluated at ``T``."""
    Z1 = Z1 if isinstance(Z1, DepthImage) else DepthImage.from_array(Z1)
    Z2 = Z2 if isinstance(Z2, DepthImage) else DepthImage.from_array(Z2)
    I1, I2 = _prepare(I1), _prepare(I2)
    parts = []
    if dense:
        pix = select_dense_pixels(I1, I2, Z1, Z2, kw.get("grad_threshold", 0.02), kw.get("budget", 3000))
        parts.append(dense_residuals(I1, Z1, I2, Z2, T, cam, pix)[0])
    parts.append(point_to_point_residuals(matches, Z1, Z2, T, cam)[0])
    parts.append(map_residuals(map_factors, T, cam)[0])
    r = np.concatenate(parts)
    return 0.5 * float(r @ r)
