"""Run each pose-estimation mode on a small synthetic scene and print its APE.

    python3 demos/modes.py
"""

import time

from slamkit.eval.metrics import compute_ape
from slamkit.eval.synthetic import SyntheticScene, generate_synthetic
from slamkit.pipeline import PipelineConfig, run

RUNS = [
    ("stereo", dict(rig="stereo", n_frames=100, n_landmarks=1000, pixel_sigma=0.5), "none"),
    ("multi-stereo", dict(trajectory="square", rig="quad-stereo", n_frames=100, n_landmarks=1500, pixel_sigma=0.5), "none"),
    ("stereo-inertial", dict(rig="stereo", n_frames=100, n_landmarks=1000, gravity_tilt_deg=5.0), "none"),
    ("mono", dict(rig="mono", n_frames=60, n_landmarks=1500), "sim"),
    ("mono-depth", dict(rig="mono", laps=0.05, n_frames=12, width=320, height=240, render_images=True, texture_scale=0.15), "none"),
]


def main():
    for mode, scene, align in RUNS:
        d = generate_synthetic(SyntheticScene(**scene))
        t0 = time.perf_counter()
        r = run(PipelineConfig(mode=mode), d, initial_pose=d.ground_truth.poses[0])
        dt = time.perf_counter() - t0
        ape = compute_ape(d.ground_truth, r.trajectory, align)
        print(f"{mode:16s} {len(d.frames):4d} frames  {r.keyframes:3d} keyframes  APE ({align}) {ape:.2e} m  {dt:5.1f} s")


if __name__ == "__main__":
    main()
