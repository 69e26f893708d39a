"""Top-down SVG of ground truth against an estimate, written as plain text."""

from __future__ import annotations

import numpy as np

from ..trajectory import TrajectoryEstimate


def _polyline(P, color, width):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in P)
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def trajectory_svg(gt: TrajectoryEstimate | None, est: TrajectoryEstimate, loops=(), size: int = 600, margin: int = 30) -> str:
    """SVG text: x/y plane viewed from above; ``loops`` are (t_a, t_b) timestamp pairs for closure markers."""
    paths = [p for p in (gt, est) if p is not None and len(p)]
    if not paths:
        raise ValueError("nothing to plot")
    allp = np.vstack([p.positions[:, :2] for p in paths])
    lo, hi = allp.min(0), allp.max(0)
    span = float(max(hi - lo)) or 1.0
    s = (size - 2 * margin) / span

    def tf(P):
        P = np.asarray(P)[:, :2]
        return np.column_stack([margin + (P[:, 0] - lo[0]) * s, size - margin - (P[:, 1] - lo[1]) * s])

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if gt is not None and len(gt):
        out.append(_polyline(tf(gt.positions), "#444444", 1.5))
    out.append(_polyline(tf(est.positions), "#d62728", 1.5))
    if len(loops):
        ts = np.asarray(est.timestamps)
        E = tf(est.positions)
        for ta, tb in loops:
            a, b = E[np.argmin(np.abs(ts - ta))], E[np.argmin(np.abs(ts - tb))]
            out.append(f'<line x1="{a[0]:.2f}" y1="{a[1]:.2f}" x2="{b[0]:.2f}" y2="{b[1]:.2f}" stroke="#1f77b4" stroke-width="1"/>')
            out.append(f'<circle cx="{b[0]:.2f}" cy="{b[1]:.2f}" r="3" fill="#1f77b4"/>')
    out.append(f'<text x="{margin}" y="{margin - 10}" font-size="12" font-family="sans-serif">'
               f'gt (grey), estimate (red), loop closures (blue); scale {span:.3g} m</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, gt, est, loops=()) -> None:
    with open(path, "w") as f:
        f.write(trajectory_svg(gt, est, loops))
