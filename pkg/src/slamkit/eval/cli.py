"""``slamkit`` command line: track, eval, synth, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 tracking failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..errors import ConfigError, DatasetError, InsufficientDataError, SlamError, SynchronizationError, TimestampError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRACKING = 0, 1, 2, 3

log = logging.getLogger("slamkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slamkit", description="Modular visual SLAM toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("track", help="run a tracking mode over a dataset directory")
    t.add_argument("--mode", required=True, choices=["mono", "stereo", "multi-stereo", "stereo-inertial", "mono-depth"])
    t.add_argument("--format", required=True, choices=["tum-rgbd", "euroc", "synthetic"])
    t.add_argument("--input", required=True)
    t.add_argument("--output", required=True)
    t.add_argument("--slam", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--deterministic-backend", action="store_true")
    t.add_argument("--map-dump")
    t.add_argument("--max-frames", type=int)

    e = sub.add_parser("eval", help="compare an estimate with ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--scheme", default="whole", choices=["whole", "kitti", "rpe1s", "frame"])
    e.add_argument("--align", default="rigid", choices=["none", "rigid", "sim"])
    e.add_argument("--json", action="store_true")

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    g = sub.add_parser("plot", help="top-down SVG of ground truth and estimate")
    g.add_argument("--gt", required=True)
    g.add_argument("--est", required=True)
    g.add_argument("--out", required=True)
    return p


def cmd_track(a) -> int:
    from ..pipeline import PipelineConfig, parse_key_values, run
    from .datasets import read_dataset

    kv = parse_key_values(a.config) if a.config else {}
    kv["mode"] = a.mode
    if a.slam:
        kv["slam"] = True
    if a.seed is not None:
        kv["seed"] = a.seed
    if a.deterministic_backend:
        kv["deterministic_backend"] = True
    cfg = PipelineConfig.from_dict(kv)
    data = read_dataset(a.input, a.format)
    for k, v in data.report.items():
        log.info("dataset %s: %s", k, v)
    frames = data.frames if a.max_frames is None else data.frames[: a.max_frames]
    if not len(frames):
        raise DatasetError(f"{a.input}: no frames")
    res = run(cfg, frames, rig=data.rig)
    res.trajectory.write_tum(a.output)
    if a.map_dump and res.global_map is not None:
        res.global_map.dump(a.map_dump)
    elif a.map_dump:
        log.warning("--map-dump needs --slam; nothing written")
    st = res.odometry.status
    log.info("%d frames, %d keyframes, %d lost, %d loops", len(st), res.keyframes, st.count("lost"), len(res.loops))
    if len(st) > 1 and all(s == "lost" for s in st[1:]):
        print("tracking failed: no frame after the first was tracked", file=sys.stderr)
        return EXIT_TRACKING
    return EXIT_OK


def cmd_eval(a) -> int:
    from ..trajectory import TrajectoryEstimate
    from .metrics import compute_relative_errors

    gt = TrajectoryEstimate.read_tum(a.gt)
    est = TrajectoryEstimate.read_tum(a.est)
    try:
        rep = compute_relative_errors(gt, est, a.scheme, a.align)
    except InsufficientDataError as exc:
        raise DatasetError(str(exc)) from None
    d = rep.to_dict()
    if a.json:
        print(json.dumps(_jsonable(d), indent=2, sort_keys=True))
    else:
        unit_t = "%" if a.scheme in ("whole", "kitti") else "m"
        unit_r = "deg/m" if a.scheme == "kitti" else "deg"
        print(f"alignment   {rep.align} (scale {rep.scale:.6g})")
        print(f"associated  {rep.associated} ({rep.unassociated} unassociated)")
        print(f"rmse_ape    {rep.rmse_ape:.6g} m")
        print(f"avg_rte     {rep.avg_rte:.6g} {unit_t}")
        print(f"avg_re      {rep.avg_re:.6g} {unit_r}")
    return EXIT_OK


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def cmd_synth(a) -> int:
    from ..pipeline import parse_key_values
    from .datasets import write_synthetic
    from .synthetic import SyntheticScene, generate_synthetic

    try:
        scene = SyntheticScene.from_dict(parse_key_values(a.config))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    write_synthetic(generate_synthetic(scene), a.out)
    return EXIT_OK


def cmd_plot(a) -> int:
    from ..trajectory import TrajectoryEstimate
    from .plot import write_svg

    write_svg(a.out, TrajectoryEstimate.read_tum(a.gt), TrajectoryEstimate.read_tum(a.est))
    return EXIT_OK


COMMANDS = {"track": cmd_track, "eval": cmd_eval, "synth": cmd_synth, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if a.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, TimestampError, SynchronizationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SlamError as exc:
        print(f"tracking failure: {exc}", file=sys.stderr)
        return EXIT_TRACKING


if __name__ == "__main__":
    sys.exit(main())
