"""Timestamped pose sequences and the TUM text format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, TimestampError
from .geometry import RigidTransform

STATUSES = ("tracked", "keyframe", "lost", "relocalized")


@dataclass
class TrajectoryEstimate:
    """Poses stored as T_bw (world to body); files hold T_wb per TUM convention."""

    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    status: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.timestamps)

    def append(self, t: float, T_bw: RigidTransform, status: str = "tracked") -> None:
        if self.timestamps and not t > self.timestamps[-1]:
            raise TimestampError(f"timestamp {t} not after {self.timestamps[-1]}")
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        self.timestamps.append(float(t))
        self.poses.append(T_bw)
        self.status.append(status)

    @property
    def positions(self) -> np.ndarray:
        """Body origins in world coordinates, (N, 3)."""
        return np.array([T.inverse().t for T in self.poses]).reshape(-1, 3)

    def world_poses(self) -> list:
        return [T.inverse() for T in self.poses]

    def to_tum_lines(self) -> list:
        lines = []
        for t, T in zip(self.timestamps, self.poses):
            v = T.inverse().to_tum() + 0.0  # no negative zeros in text
            lines.append(f"{t:.9f} " + " ".join(f"{x:.9g}" for x in v))
        return lines

    def write_tum(self, path) -> None:
        with open(path, "w") as f:
            f.write("# timestamp tx ty tz qx qy qz qw\n")
            for line in self.to_tum_lines():
                f.write(line + "\n")

    @classmethod
    def from_world_poses(cls, timestamps, T_wb) -> "TrajectoryEstimate":
        out = cls()
        for t, T in zip(timestamps, T_wb):
            out.append(t, T.inverse())
        return out

    @classmethod
    def read_tum(cls, path) -> "TrajectoryEstimate":
        ts, poses = [], []
        with open(path) as f:
            for n, line in enumerate(f, 1):
                s = line.strip()
                if not s or s.startswith("#"):
                    continue
                parts = s.replace(",", " ").split()
                if len(parts) != 8:
                    raise DatasetError(f"{path}:{n}: expected 8 values, got {len(parts)}")
                try:
                    vals = [float(p) for p in parts]
                except ValueError as exc:
                    raise DatasetError(f"{path}:{n}: {exc}") from None
                ts.append(vals[0])
                poses.append(RigidTransform.from_tum(vals[1:]))
        order = np.argsort(ts, kind="stable")
        out = cls()
        for i in order:
            out.append(ts[i], poses[i].inverse())
        return out
