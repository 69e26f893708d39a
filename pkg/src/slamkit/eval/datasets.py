"""Dataset readers (TUM RGB-D, EuRoC, synthetic directories) and rig calibration files."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from ..errors import DatasetError
from ..frontends import FrameBundle
from ..geometry import CameraModel, CameraRig, RigidTransform
from ..trajectory import TrajectoryEstimate
from ..vio import ImuSample

log = logging.getLogger(__name__)

TUM_ASSOCIATION = 0.02  # s
TUM_DEPTH_SCALE = 5000.0  # counts per metre
EUROC_ASSOCIATION = 0.005  # s, stereo pair sync
# Freiburg 3 factory intrinsics (rectified images)
TUM_FR3 = CameraModel(535.4, 539.2, 320.1, 247.6, 640, 480)
FORMATS = ("tum-rgbd", "euroc", "synthetic")


@dataclass
class Dataset:
    rig: CameraRig
    frames: list  # FrameBundle, images loaded lazily through LazyFrames
    ground_truth: TrajectoryEstimate | None = None
    report: dict = field(default_factory=dict)  # association counts, never silent

    def __len__(self) -> int:
        return len(self.frames)


class LazyFrames:
    """Sequence of FrameBundle built on access so large sequences stay on disk."""

    def __init__(self, n: int, make):
        self._n = n
        self._make = make

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if isinstance(i, slice):
            idx = range(self._n)[i]
            return LazyFrames(len(idx), lambda k: self._make(idx[k]))
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(i)
        return self._make(i)

    def __iter__(self):
        for i in range(self._n):
            yield self._make(i)


# ------------------------------------------------------------------ text


def read_table(path, min_cols: int, sep=None) -> list:
    """Rows of a whitespace/comma separated file; '#' lines are comments."""
    if not os.path.exists(path):
        raise DatasetError(f"missing file {path}")
    rows = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = [p for p in re.split(r"[,\s]+", s) if p] if sep is None else s.split(sep)
            if len(parts) < min_cols:
                raise DatasetError(f"{path}:{n}: expected at least {min_cols} columns, got {len(parts)}")
            rows.append((n, parts))
    return rows


def _floats(path, n, parts):
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise DatasetError(f"{path}:{n}: {exc}") from None


def associate_stamps(a, b, tolerance: float):
    """Greedy one-to-one nearest association; returns index pairs sorted by ``a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not len(a) or not len(b):
        return []
    cand = []
    order = np.argsort(b)
    bs = b[order]
    for i, t in enumerate(a):
        k = np.searchsorted(bs, t)
        for kk in (k - 1, k):
            if 0 <= kk < len(bs) and abs(bs[kk] - t) <= tolerance:
                cand.append((abs(bs[kk] - t), i, int(order[kk])))
    cand.sort()
    used_a, used_b, out = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    out.sort()
    return out


def euroc_seconds(stamp: str) -> float:
    """Nanosecond integer string to seconds, correctly rounded to the nearest double."""
    s = stamp.strip()
    if not s.isdigit():
        raise ValueError(f"bad nanosecond timestamp {stamp!r}")
    return int(s) / 1_000_000_000


# ------------------------------------------------------------------ images


def load_image(path) -> np.ndarray:
    """Grey image in [0, 1]; ``.npy`` arrays are passed through."""
    if str(path).endswith(".npy"):
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im.convert("L"), dtype=float) / 255.0
    return a


def load_depth(path, scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    if str(path).endswith(".npy"):
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im, dtype=float)
    return a / scale


# ------------------------------------------------------------------ rig files


def write_rig(path, rig: CameraRig) -> None:
    """One line per camera: ``width height fx fy cx cy tx ty tz qx qy qz qw`` (T_cb)."""
    with open(path, "w") as f:
        f.write("# width height fx fy cx cy  camera-from-body tx ty tz qx qy qz qw\n")
        for cam, T in rig.cameras:
            vals = [cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, *T.to_tum()]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_rig(path) -> CameraRig:
    cams = []
    for n, parts in read_table(path, 13):
        v = _floats(path, n, parts[:13])
        try:
            cams.append((CameraModel(v[2], v[3], v[4], v[5], int(v[0]), int(v[1])), RigidTransform.from_tum(v[6:13])))
        except ValueError as exc:
            raise DatasetError(f"{path}:{n}: {exc}") from None
    if not cams:
        raise DatasetError(f"{path}: no cameras")
    return CameraRig(tuple(cams))


# ------------------------------------------------------------------ TUM


def _tum_list(path):
    rows = read_table(path, 2)
    out = []
    for n, p in rows:
        try:
            out.append((float(p[0]), p[1]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{n}: {exc}") from None
    return out


def read_tum_rgbd(root, rig: CameraRig | None = None, tolerance: float = TUM_ASSOCIATION) -> Dataset:
    rgb = _tum_list(os.path.join(root, "rgb.txt"))
    depth = _tum_list(os.path.join(root, "depth.txt"))
    pairs = associate_stamps([t for t, _ in rgb], [t for t, _ in depth], tolerance)
    report = {"rgb": len(rgb), "depth": len(depth), "associated": len(pairs),
              "unassociated_rgb": len(rgb) - len(pairs), "unassociated_depth": len(depth) - len(pairs)}
    if not pairs:
        log.warning("%s: no rgb/depth pairs within %.0f ms", root, tolerance * 1e3)
    elif report["unassociated_rgb"] or report["unassociated_depth"]:
        log.warning("%s: %d rgb and %d depth frames left unassociated", root, report["unassociated_rgb"], report["unassociated_depth"])
    if rig is None:
        rp = os.path.join(root, "rig.txt")
        rig = read_rig(rp) if os.path.exists(rp) else CameraRig(((TUM_FR3, RigidTransform.identity()),))

    def make(k):
        i, j = pairs[k]
        t = rgb[i][0]
        img = load_image(os.path.join(root, rgb[i][1]))
        dep = load_depth(os.path.join(root, depth[j][1]))
        return FrameBundle(t, [img], None, [dep], [], None)

    gt = None
    gp = os.path.join(root, "groundtruth.txt")
    if os.path.exists(gp):
        gt = TrajectoryEstimate.read_tum(gp)
    return Dataset(rig, LazyFrames(len(pairs), make), gt, report)


# ------------------------------------------------------------------ EuRoC


def _euroc_sensor(path) -> tuple:
    """Minimal reader for the camera ``sensor.yaml`` fields used here."""
    text = open(path).read()

    def numbers(key):
        m = re.search(key + r"\s*:\s*\[([^\]]*)\]", text, re.S)
        if not m:
            raise DatasetError(f"{path}: no {key}")
        return [float(x) for x in re.split(r"[,\s]+", m.group(1).strip()) if x]

    fu, fv, cu, cv = numbers("intrinsics")
    w, h = (int(x) for x in numbers("resolution"))
    m = re.search(r"T_BS:.*?data\s*:\s*\[([^\]]*)\]", text, re.S)
    if not m:
        raise DatasetError(f"{path}: no T_BS")
    T_bs = np.array([float(x) for x in re.split(r"[,\s]+", m.group(1).strip()) if x]).reshape(4, 4)
    T_sb = RigidTransform.from_matrix(T_bs[:3, :3], T_bs[:3, 3]).inverse()
    return CameraModel(fu, fv, cu, cv, w, h), T_sb


def read_euroc(root, rig: CameraRig | None = None, tolerance: float = EUROC_ASSOCIATION) -> Dataset:
    mav = os.path.join(root, "mav0") if os.path.isdir(os.path.join(root, "mav0")) else root
    cam_dirs = sorted(d for d in os.listdir(mav) if re.fullmatch(r"cam\d+", d))
    if not cam_dirs:
        raise DatasetError(f"{mav}: no cam* directories")
    lists = []
    for d in cam_dirs:
        p = os.path.join(mav, d, "data.csv")
        rows = read_table(p, 2)
        try:
            lists.append([(euroc_seconds(r[0]), os.path.join(mav, d, "data", r[1])) for _, r in rows])
        except ValueError as exc:
            raise DatasetError(f"{p}: {exc}") from None
    if rig is None:
        rp = os.path.join(root, "rig.txt")
        if os.path.exists(rp):
            rig = read_rig(rp)
        else:
            rig = CameraRig(tuple(_euroc_sensor(os.path.join(mav, d, "sensor.yaml")) for d in cam_dirs))
    # frames: cam0 stamps with every other camera associated
    base = lists[0]
    keep = {i: [i] for i in range(len(base))}
    for other in lists[1:]:
        pairs = dict(associate_stamps([t for t, _ in base], [t for t, _ in other], tolerance))
        keep = {i: v + [pairs[i]] for i, v in keep.items() if i in pairs}
    idx = sorted(keep)
    report = {f"{d}_frames": len(l) for d, l in zip(cam_dirs, lists)}
    report["associated"] = len(idx)
    report["unassociated"] = len(base) - len(idx)

    imu = []
    ip = os.path.join(mav, "imu0", "data.csv")
    if os.path.exists(ip):
        for n, r in read_table(ip, 7):
            v = _floats(ip, n, r[1:7])
            imu.append(ImuSample(euroc_seconds(r[0]), v[:3], v[3:6]))
    imu_t = np.array([s.timestamp for s in imu])
    report["imu"] = len(imu)

    def make(k):
        i = idx[k]
        js = keep[i]
        t = base[i][0]
        images = [load_image(lists[c][j][1]) for c, j in enumerate(js)]
        stamps = [lists[c][j][0] for c, j in enumerate(js)]
        samples = []
        if len(imu) and k > 0:
            t0 = base[idx[k - 1]][0]
            # 1 us slack: doubles near 1.4e9 s resolve only ~0.2 us
            lo = np.searchsorted(imu_t, t0 - 1e-6)
            hi = np.searchsorted(imu_t, t + 1e-6)
            samples = imu[lo:hi]
        return FrameBundle(t, images, None, None, samples, stamps)

    gt = None
    gp = os.path.join(mav, "state_groundtruth_estimate0", "data.csv")
    if os.path.exists(gp):
        gt = TrajectoryEstimate()
        rows = read_table(gp, 8)
        recs = []
        for n, r in rows:
            v = _floats(gp, n, r[1:8])
            # EuRoC order: p (xyz), q (w x y z)
            recs.append((euroc_seconds(r[0]), RigidTransform.from_tum([*v[:3], v[4], v[5], v[6], v[3]])))
        for t, T in sorted(recs, key=lambda x: x[0]):
            gt.append(t, T.inverse())
    return Dataset(rig, LazyFrames(len(idx), make), gt, report)


# ------------------------------------------------------------------ synthetic


def write_synthetic(data, out_dir) -> None:
    """Serialize a SyntheticData run: rig, frames, keypoints, IMU, ground truth, images as .npy."""
    os.makedirs(out_dir, exist_ok=True)
    write_rig(os.path.join(out_dir, "rig.txt"), data.rig)
    data.ground_truth.write_tum(os.path.join(out_dir, "groundtruth.txt"))
    with open(os.path.join(out_dir, "scene.txt"), "w") as f:
        for k, v in data.scene.to_dict().items():
            if k == "occlusions":
                v = ";".join(",".join(str(x) for x in o) for o in v)
            elif isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            f.write(f"{k} = {v}\n")
    with open(os.path.join(out_dir, "frames.txt"), "w") as f:
        f.write("# index timestamp\n")
        for i, fr in enumerate(data.frames):
            f.write(f"{i} {fr.timestamp:.17g}\n")
    with open(os.path.join(out_dir, "keypoints.txt"), "w") as f:
        f.write("# frame camera id x y\n")
        for i, fr in enumerate(data.frames):
            for c, kps in enumerate(fr.keypoints or []):
                for key in sorted(kps):
                    x, y = kps[key]
                    f.write(f"{i} {c} {key} {x:.17g} {y:.17g}\n")
    with open(os.path.join(out_dir, "imu.txt"), "w") as f:
        f.write("# timestamp gx gy gz ax ay az\n")
        for s in data.imu:
            f.write(" ".join(f"{v:.17g}" for v in (s.timestamp, *s.gyro, *s.accel)) + "\n")
    g = np.asarray(data.gravity, dtype=float)
    with open(os.path.join(out_dir, "gravity.txt"), "w") as f:
        f.write(" ".join(f"{v:.17g}" for v in g) + "\n")
    if data.frames and data.frames[0].images is not None:
        for c in range(len(data.rig)):
            os.makedirs(os.path.join(out_dir, f"cam{c}"), exist_ok=True)
            os.makedirs(os.path.join(out_dir, f"depth{c}"), exist_ok=True)
        for i, fr in enumerate(data.frames):
            for c in range(len(data.rig)):
                np.save(os.path.join(out_dir, f"cam{c}", f"{i:06d}.npy"), fr.images[c])
                if fr.depths is not None:
                    np.save(os.path.join(out_dir, f"depth{c}", f"{i:06d}.npy"), fr.depths[c])


def read_synthetic_dir(root) -> Dataset:
    rig = read_rig(os.path.join(root, "rig.txt"))
    fp = os.path.join(root, "frames.txt")
    stamps = [(int(p[0]), _floats(fp, n, p[1:2])[0]) for n, p in read_table(fp, 2)]
    stamps.sort()
    n_cam = len(rig)
    kps = {}
    kp = os.path.join(root, "keypoints.txt")
    if os.path.exists(kp):
        for n, p in read_table(kp, 5):
            v = _floats(kp, n, p[3:5])
            try:
                i, c, key = int(p[0]), int(p[1]), int(p[2])
            except ValueError as exc:
                raise DatasetError(f"{kp}:{n}: {exc}") from None
            kps.setdefault(i, [dict() for _ in range(n_cam)])[c][key] = (v[0], v[1])
    imu = []
    ip = os.path.join(root, "imu.txt")
    if os.path.exists(ip):
        for n, p in read_table(ip, 7):
            v = _floats(ip, n, p[:7])
            imu.append(ImuSample(v[0], v[1:4], v[4:7]))
    imu_t = np.array([s.timestamp for s in imu])
    has_images = os.path.isdir(os.path.join(root, "cam0"))
    has_keys = os.path.exists(kp)

    def make(k):
        i, t = stamps[k]
        images = depths = None
        if has_images:
            images = [np.load(os.path.join(root, f"cam{c}", f"{i:06d}.npy")) for c in range(n_cam)]
            dp = os.path.join(root, "depth0", f"{i:06d}.npy")
            if os.path.exists(dp):
                depths = [np.load(os.path.join(root, f"depth{c}", f"{i:06d}.npy")) for c in range(n_cam)]
        samples = []
        if imu and k > 0:
            lo = np.searchsorted(imu_t, stamps[k - 1][1] - 1e-9)
            hi = np.searchsorted(imu_t, t + 1e-9)
            samples = imu[lo:hi]
        keys = kps.get(i, [dict() for _ in range(n_cam)]) if has_keys else None
        return FrameBundle(t, images, keys, depths, samples)

    gt = TrajectoryEstimate.read_tum(os.path.join(root, "groundtruth.txt")) if os.path.exists(os.path.join(root, "groundtruth.txt")) else None
    return Dataset(rig, LazyFrames(len(stamps), make), gt, {"frames": len(stamps), "imu": len(imu)})


def read_dataset(path, format: str, rig: CameraRig | None = None) -> Dataset:
    if not os.path.isdir(path):
        raise DatasetError(f"{path} is not a directory")
    if format == "tum-rgbd":
        return read_tum_rgbd(path, rig)
    if format == "euroc":
        return read_euroc(path, rig)
    if format in ("synthetic", "synthetic-dir"):
        return read_synthetic_dir(path)
    raise DatasetError(f"unknown dataset format {format!r}")
