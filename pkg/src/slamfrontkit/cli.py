"""Command-line front end.

Subcommands:
    run       track a dataset and write trajectory/diagnostics/summary
    evaluate  absolute trajectory error between two trajectory files
    bench     per-stage timing statistics over a dataset
    extract   precompute features for a dataset into a .lsft file

Exit codes: 0 success, 2 tracking lost (partial outputs are still
written), 1 configuration/dataset/evaluation errors.
"""
import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time

import numpy as np

from .datasets import load_dataset
from .errors import LayoutError, SlamFrontKitError, TrackingLostError
from .evaluation import (
    Trajectory,
    ate_rmse,
    read_trajectory_kitti,
    read_trajectory_tum,
    write_trajectory_tum,
)
from .features import (
    BuiltinDetector,
    read_feature_header,
    load_features,
    save_features,
)
from .matcher import MatcherWeights, load_matcher_weights
from .pyramid import PyramidConfig, build_pyramid, detect_multiscale
from .stereo import DepthMap, SgmConfig, compute_depth, keypoint_depths
from .tracking import FrameInput, TrackerConfig, track_sequence

THREADS_ENV = "SLAMFRONTKIT_THREADS"

DIAG_COLUMNS = ("frame_index", "tracked", "inliers", "keyframe",
                "ms_extract", "ms_stereo", "ms_match", "ms_optimize", "ms_total")


@dataclasses.dataclass
class RunConfig:
    dataset_kind: str = "image-folder"
    dataset_root: str = "."
    dataset_sequence: str = ""
    feature_source: str = "builtin"
    matcher_weights: str = "identity"
    output_dir: str = "out"
    threads: int = 1
    pyramid: PyramidConfig = dataclasses.field(default_factory=PyramidConfig)
    sgm: SgmConfig = dataclasses.field(default_factory=SgmConfig)
    tracker: TrackerConfig = dataclasses.field(default_factory=TrackerConfig)


_SECTION_TYPES = {"pyramid": PyramidConfig, "sgm": SgmConfig, "tracker": TrackerConfig}
_DATASET_KEYS = {"kind": "dataset_kind", "root": "dataset_root",
                 "sequence": "dataset_sequence"}
_TOP_KEYS = ("dataset", "feature_source", "matcher_weights", "output_dir",
             "threads", "pyramid", "sgm", "tracker")


def _build_section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ValueError(f"config section {name!r} must be an object")
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - valid
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**raw)


def load_config(path, overrides=()):
    """Parse a JSON config file and apply key=value overrides.

    Override keys use dotted paths into the JSON structure
    (e.g. pyramid.levels=4, dataset.root=/data); values parse as JSON
    with a fallback to plain strings.
    """
    with open(path, "r") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parsed

    unknown = set(raw) - set(_TOP_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig()
    dataset = raw.get("dataset", {})
    if not isinstance(dataset, dict):
        raise ValueError("config key 'dataset' must be an object")
    unknown = set(dataset) - set(_DATASET_KEYS)
    if unknown:
        raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
    for key, attr in _DATASET_KEYS.items():
        if key in dataset:
            setattr(cfg, attr, dataset[key])
    for key in ("feature_source", "matcher_weights", "output_dir"):
        if key in raw:
            setattr(cfg, key, str(raw[key]))
    if "threads" in raw:
        cfg.threads = int(raw["threads"])
    elif os.environ.get(THREADS_ENV):
        cfg.threads = int(os.environ[THREADS_ENV])
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            setattr(cfg, name, _build_section(cls, raw[name], name))
    if cfg.threads < 1:
        raise ValueError(f"threads must be >= 1, got {cfg.threads}")
    return cfg


def _apply_thread_count(threads):
    # numba caps its pool at the value it booted with, so clamp
    try:
        import numba
        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass


def _load_weights(cfg, descriptor_dim):
    if cfg.matcher_weights == "identity":
        return MatcherWeights.identity(descriptor_dim)
    weights = load_matcher_weights(cfg.matcher_weights)
    if weights.dim != descriptor_dim:
        raise LayoutError(
            f"matcher weights dim {weights.dim} != descriptor dim {descriptor_dim}"
        )
    return weights


def _frame_stream(cfg, seq, timings):
    """Yield FrameInputs for tracking, recording per-frame stage times."""
    use_depth = seq.has_depth
    use_stereo = not use_depth and seq.rig is not None
    if not use_depth and not use_stereo:
        raise LayoutError(
            "dataset provides neither depth maps nor a stereo rig; cannot track"
        )
    feature_file = None if cfg.feature_source == "builtin" else cfg.feature_source
    if feature_file is not None:
        header = read_feature_header(feature_file)
        if header.frame_count < len(seq):
            raise LayoutError(
                f"feature file holds {header.frame_count} frames, "
                f"dataset has {len(seq)}"
            )
    detector = BuiltinDetector()
    for frame in seq:
        t0 = time.perf_counter()
        if feature_file is not None:
            feats = load_features(feature_file, frame.index)
        else:
            pyr = build_pyramid(frame.left, cfg.pyramid)
            feats = detect_multiscale(pyr, cfg.pyramid, detector, threads=cfg.threads)
        t1 = time.perf_counter()
        if use_depth:
            depth_map = DepthMap(depth=frame.depth)
        else:
            depth_map = compute_depth(frame.left, frame.right, seq.rig, cfg.sgm)
        depths = keypoint_depths(feats, depth_map)
        t2 = time.perf_counter()
        timings[frame.index] = ((t1 - t0) * 1e3, (t2 - t1) * 1e3)
        yield FrameInput(index=frame.index, timestamp=frame.timestamp,
                         features=feats, depths=depths,
                         width=frame.left.width, height=frame.left.height)


def _atomic_text(path, text):
    import tempfile
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _merge_rows(diagnostics, timings):
    rows = []
    for d in diagnostics:
        ms_extract, ms_stereo = timings.get(d["frame_index"], (0.0, 0.0))
        rows.append({
            "frame_index": d["frame_index"],
            "tracked": d["tracked"],
            "inliers": d["inliers"],
            "keyframe": int(d["keyframe"]),
            "ms_extract": ms_extract,
            "ms_stereo": ms_stereo,
            "ms_match": d["ms_match"],
            "ms_optimize": d["ms_optimize"],
            "ms_total": ms_extract + ms_stereo + d["ms_track"],
        })
    return rows


def _write_outputs(out_dir, trajectory, rows, lost_frame):
    os.makedirs(out_dir, exist_ok=True)
    if trajectory:
        write_trajectory_tum(os.path.join(out_dir, "trajectory.txt"),
                             Trajectory(entries=tuple(trajectory)))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=DIAG_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v)
                         for k, v in row.items()})
    _atomic_text(os.path.join(out_dir, "diagnostics.csv"), buf.getvalue())
    totals = [r["ms_total"] for r in rows] or [0.0]
    summary = {
        "frames": len(rows),
        "keyframes": sum(r["keyframe"] for r in rows),
        "tracking_lost_frame": lost_frame,
        "mean_ms_total": float(np.mean(totals)),
        "median_ms_total": float(np.median(totals)),
    }
    _atomic_text(os.path.join(out_dir, "summary.json"),
                 json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_run(args):
    cfg = load_config(args.config, args.set or [])
    if args.features:
        cfg.feature_source = args.features
    if args.threads:
        cfg.threads = args.threads
    if args.output_dir:
        cfg.output_dir = args.output_dir
    _apply_thread_count(cfg.threads)
    seq = load_dataset(cfg.dataset_kind, cfg.dataset_root, cfg.dataset_sequence)
    dim = (read_feature_header(cfg.feature_source).descriptor_dim
           if cfg.feature_source != "builtin" else 64)
    weights = _load_weights(cfg, dim)
    timings = {}
    stream = _frame_stream(cfg, seq, timings)
    try:
        trajectory, diagnostics, _ = track_sequence(stream, seq.intrinsics,
                                                    weights, cfg.tracker)
        lost_frame = None
    except TrackingLostError as exc:
        trajectory, diagnostics = exc.trajectory, exc.diagnostics
        lost_frame = exc.frame_index
        print(f"tracking lost at frame {exc.frame_index} "
              f"({exc.inliers} inliers)", file=sys.stderr)
    rows = _merge_rows(diagnostics, timings)
    summary = _write_outputs(cfg.output_dir, trajectory, rows, lost_frame)
    print(json.dumps(summary, indent=2))
    return 2 if lost_frame is not None else 0


def cmd_evaluate(args):
    est = read_trajectory_tum(args.estimate)
    if args.format == "kitti":
        ref = read_trajectory_kitti(args.reference)
    else:
        ref = read_trajectory_tum(args.reference)
    report = ate_rmse(est, ref, align=args.align, with_scale=args.scale,
                      max_dt=args.max_dt)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_bench(args):
    cfg = load_config(args.config, args.set or [])
    if args.threads:
        cfg.threads = args.threads
    _apply_thread_count(cfg.threads)
    seq = load_dataset(cfg.dataset_kind, cfg.dataset_root, cfg.dataset_sequence)
    if args.warmup >= len(seq):
        print(f"warmup ({args.warmup}) must be below the frame count "
              f"({len(seq)}); nothing to measure", file=sys.stderr)
        return 1
    dim = (read_feature_header(cfg.feature_source).descriptor_dim
           if cfg.feature_source != "builtin" else 64)
    weights = _load_weights(cfg, dim)
    timings = {}
    stream = _frame_stream(cfg, seq, timings)
    lost_frame = None
    try:
        _, diagnostics, _ = track_sequence(stream, seq.intrinsics,
                                           weights, cfg.tracker)
    except TrackingLostError as exc:
        diagnostics = exc.diagnostics
        lost_frame = exc.frame_index
    rows = _merge_rows(diagnostics, timings)
    measured = [r for r in rows if r["frame_index"] >= args.warmup]
    if not measured:
        print("all frames fell into the warmup window", file=sys.stderr)
        return 1
    stats = {"frames_measured": len(measured), "warmup": args.warmup,
             "threads": cfg.threads, "tracking_lost_frame": lost_frame}
    for stage in ("ms_extract", "ms_stereo", "ms_match", "ms_optimize", "ms_total"):
        vals = np.array([r[stage] for r in measured])
        stats[stage] = {
            "mean": float(np.mean(vals)),
            "median": float(np.median(vals)),
            "p95": float(np.percentile(vals, 95)),
        }
    os.makedirs(cfg.output_dir, exist_ok=True)
    _atomic_text(os.path.join(cfg.output_dir, "bench.json"),
                 json.dumps(stats, indent=2) + "\n")
    print(json.dumps(stats, indent=2))
    return 0


def cmd_extract(args):
    cfg = load_config(args.config, args.set or [])
    if args.threads:
        cfg.threads = args.threads
    _apply_thread_count(cfg.threads)
    seq = load_dataset(cfg.dataset_kind, cfg.dataset_root, cfg.dataset_sequence)
    detector = BuiltinDetector()
    sets = []
    for frame in seq:
        pyr = build_pyramid(frame.left, cfg.pyramid)
        sets.append(detect_multiscale(pyr, cfg.pyramid, detector,
                                      threads=cfg.threads))
    save_features(args.output, sets)
    print(json.dumps({"frames": len(sets),
                      "keypoints": sum(len(s) for s in sets),
                      "output": args.output}, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slamfrontkit",
        description="Visual odometry front end: multiscale features, "
                    "attention matching, SGM stereo, and ATE evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="track a dataset")
    run_p.add_argument("--config", required=True, help="JSON config file")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
    run_p.add_argument("--features", help=".lsft file to use instead of the "
                                          "built-in detector")
    run_p.add_argument("--threads", type=int, help="worker thread count")
    run_p.add_argument("--output-dir", help="where to write outputs")
    run_p.set_defaults(func=cmd_run)

    eval_p = sub.add_parser("evaluate", help="absolute trajectory error")
    eval_p.add_argument("estimate", help="estimated trajectory (timestamped)")
    eval_p.add_argument("reference", help="reference trajectory")
    eval_p.add_argument("--format", choices=("tum", "kitti"), default="tum",
                        help="reference file format (default tum)")
    eval_p.add_argument("--align", action="store_true",
                        help="rigidly align estimate to reference first")
    eval_p.add_argument("--scale", action="store_true",
                        help="also fit a scale during alignment")
    eval_p.add_argument("--max-dt", type=float, default=0.02,
                        help="timestamp association window in seconds")
    eval_p.set_defaults(func=cmd_evaluate)

    bench_p = sub.add_parser("bench", help="per-stage timing statistics")
    bench_p.add_argument("--config", required=True)
    bench_p.add_argument("--set", action="append", metavar="KEY=VALUE")
    bench_p.add_argument("--threads", type=int)
    bench_p.add_argument("--warmup", type=int, default=3,
                         help="frames to discard before measuring")
    bench_p.set_defaults(func=cmd_bench)

    ext_p = sub.add_parser("extract", help="precompute features to .lsft")
    ext_p.add_argument("--config", required=True)
    ext_p.add_argument("--set", action="append", metavar="KEY=VALUE")
    ext_p.add_argument("--threads", type=int)
    ext_p.add_argument("--output", required=True, help="feature file to write")
    ext_p.set_defaults(func=cmd_extract)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SlamFrontKitError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
