"""Command-line pipeline: simulate, encode, track, train, bench.

Every run writes a manifest.json next to its outputs recording the
subcommand, resolved arguments, seed, and wall-clock timing.  Data
artifacts are deterministic for a fixed manifest; timing lives only in
the manifest.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from evtrack import __version__
from evtrack.estimators import NetEstimator
from evtrack.events import (
    DEFAULT_WINDOW_NS,
    ParseError,
    SensorGeometry,
    parse_event_stream,
    serialize_events,
    window_events,
)
from evtrack.evaluation import evaluate_pairs, load_pairs, write_report
from evtrack.geometry import MotionBounds, enclosing_aligned, write_box_csv
from evtrack.regressor.data import (
    SyntheticSetConfig,
    build_synthetic_pairs,
)
from evtrack.regressor.model import (
    CheckpointError,
    MotionRegressor,
    NetConfig,
    NumericError,
    TrainConfig,
)
from evtrack.regressor.training import evaluate_loss, train_model
from evtrack.regressor.data import stack_pairs
from evtrack.search import SearchEstimator
from evtrack.simulator import generate_events, load_scene
from evtrack.tsltd import (
    TsltdFormatError,
    encode_stream,
    export_frame_pgm,
    read_tsltd,
    write_tsltd,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message: str):  # noqa: D401 - argparse hook
        raise UsageError(message)


def _write_manifest(
    out_dir: Path, subcommand: str, arguments: Dict, seed: Optional[int],
    outputs: Sequence[str], timing_ms: Dict[str, float],
) -> None:
    manifest = {
        "subcommand": subcommand,
        "arguments": arguments,
        "seed": seed,
        "outputs": sorted(outputs),
        "timing_ms": timing_ms,
        "version": __version__,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_geometry(text: str) -> SensorGeometry:
    try:
        w_text, h_text = text.lower().split("x")
        return SensorGeometry(w=int(w_text), h=int(h_text))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad geometry {text!r}, expected WxH") from exc


def cmd_simulate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = load_scene(args.scene)
    if args.seed is not None:
        scene.seed = args.seed
    t0 = time.perf_counter()
    events, gt = generate_events(scene)
    gen_ms = (time.perf_counter() - t0) * 1e3
    serialize_events(events, out_dir / "events.txt")
    rows = [(0, 0, gt[0].box_before)] if gt else []
    for record in gt:
        rows.append((record.window_index + 1, 0, record.box_after))
    write_box_csv(rows, out_dir / "gt.csv")
    _write_manifest(
        out_dir,
        "simulate",
        {"scene": str(args.scene), "n_events": len(events),
         "n_windows": scene.n_windows, "window_ns": scene.window_ns},
        scene.seed,
        ["events.txt", "gt.csv"],
        {"generate": gen_ms},
    )
    print(f"wrote {len(events)} events over {scene.n_windows} windows "
          f"to {out_dir}")
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    geometry = _parse_geometry(args.geometry)
    events, report = parse_event_stream(args.events, geometry)
    if not report.monotonic:
        events = events.sorted_by_time()
    window_ns = int(round(args.window_us * 1000))
    t_origin = args.t_origin_ns
    if args.frames is not None:
        n_frames = args.frames
    elif len(events):
        span = int(events.t.max()) - t_origin + 1
        n_frames = max(1, math.ceil(span / window_ns))
    else:
        n_frames = 1
    t0 = time.perf_counter()
    frames = encode_stream(events, geometry, t_origin, window_ns, n_frames)
    encode_ms = (time.perf_counter() - t0) * 1e3
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_tsltd(frames, out_path)
    outputs = [out_path.name]
    if args.pgm_dir is not None:
        pgm_dir = Path(args.pgm_dir)
        pgm_dir.mkdir(parents=True, exist_ok=True)
        for idx, frame in enumerate(frames):
            for p in export_frame_pgm(frame, pgm_dir / f"frame{idx:04d}"):
                outputs.append(str(p))
    _write_manifest(
        out_path.parent,
        "encode",
        {
            "events": str(args.events),
            "geometry": args.geometry,
            "t_origin_ns": t_origin,
            "window_us": args.window_us,
            "frames": n_frames,
            "n_events": len(events),
            "non_monotonic": report.non_monotonic_count,
        },
        None,
        outputs,
        {"encode": encode_ms},
    )
    print(f"encoded {len(events)} events into {n_frames} frames -> {out_path}")
    return EXIT_OK


def _load_frames_for_track(args: argparse.Namespace):
    if args.tsltd is not None:
        return read_tsltd(args.tsltd)
    if args.events is None:
        raise UsageError("provide --tsltd or --events")
    geometry = _parse_geometry(args.geometry)
    events, report = parse_event_stream(args.events, geometry)
    if not report.monotonic:
        events = events.sorted_by_time()
    window_ns = int(round(args.window_us * 1000))
    if len(events):
        span = int(events.t.max()) - args.t_origin_ns + 1
        n_frames = max(1, math.ceil(span / window_ns))
    else:
        n_frames = args.frames_per_pair
    return encode_stream(events, geometry, args.t_origin_ns, window_ns, n_frames)


def cmd_track(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = _load_frames_for_track(args)
    pairs = load_pairs(args.gt, frames, args.frames_per_pair)
    if args.estimator == "search":
        estimator = SearchEstimator()
    else:
        if args.model is None:
            raise UsageError("--estimator net requires --model")
        model = MotionRegressor.load(args.model)
        estimator = NetEstimator(model, MotionBounds(), tau=args.tau)
    t0 = time.perf_counter()
    report = evaluate_pairs(pairs, estimator, n_rep=args.n_rep)
    track_ms = (time.perf_counter() - t0) * 1e3
    write_report(report, out_dir / "report.csv", out_dir / "report.json")
    _write_manifest(
        out_dir,
        "track",
        {
            "gt": str(args.gt),
            "estimator": args.estimator,
            "model": str(args.model) if args.model else None,
            "frames_per_pair": args.frames_per_pair,
            "n_rep": args.n_rep,
            "n_pairs": report.n_pairs,
        },
        None,
        ["report.csv", "report.json"],
        {"track": track_ms, "per_pair": track_ms / max(1, report.n_pairs * args.n_rep)},
    )
    print(f"AOR={report.aor:.4f} AR={report.ar:.4f} over {report.n_pairs} pairs")
    return EXIT_OK


def _net_config_from_dict(data: Dict) -> NetConfig:
    data = dict(data)
    preset = data.pop("preset", "lite")
    if preset == "lite":
        return NetConfig.lite(**data)
    if preset in ("paper_width", "full"):
        return NetConfig.paper_width(**data)
    raise ValueError(f"unknown net preset {preset!r}")


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.config, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    net_cfg = _net_config_from_dict(config.get("net", {}))
    tc_data = dict(config.get("train", {}))
    tc = TrainConfig(**tc_data)
    data_cfg = dict(config.get("data", {}))
    n_train = int(data_cfg.pop("n_train", 256))
    n_val = int(data_cfg.pop("n_val", 64))
    data_seed = int(data_cfg.pop("seed", 0))
    set_cfg = SyntheticSetConfig(**data_cfg) if data_cfg else SyntheticSetConfig()

    t0 = time.perf_counter()
    train_pairs = build_synthetic_pairs(n_train, data_seed, set_cfg)
    val_pairs = build_synthetic_pairs(
        n_val, data_seed, set_cfg, index_offset=n_train
    )
    data_ms = (time.perf_counter() - t0) * 1e3

    model = MotionRegressor(net_cfg)
    t0 = time.perf_counter()
    log = train_model(model, train_pairs, tc, val_pairs=val_pairs,
                      log_path=out_dir / "train_log.csv")
    train_ms = (time.perf_counter() - t0) * 1e3
    model.save(out_dir / "model.ckpt")

    val_patches, val_targets = stack_pairs(val_pairs)
    final_val = evaluate_loss(model, val_patches, val_targets)
    zero_val = float(np.mean(np.sum(val_targets.astype(np.float64) ** 2, axis=1)))
    summary = {
        "initial_train_loss": log.initial_train_loss,
        "final_train_loss": log.final_train_loss,
        "final_val_loss": final_val,
        "zero_baseline_val_loss": zero_val,
        "steps": len(log.steps),
        "epochs": tc.epochs,
        "n_train": n_train,
        "n_val": n_val,
    }
    with open(out_dir / "train_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(
        out_dir,
        "train",
        {"config": str(args.config), "n_train": n_train, "n_val": n_val,
         "epochs": tc.epochs, "batch_size": tc.batch_size,
         "learning_rate": tc.learning_rate, "data_seed": data_seed,
         "net_seed": net_cfg.seed, "train_seed": tc.seed},
        tc.seed,
        ["model.ckpt", "train_log.csv", "train_summary.json"],
        {"data_generation": data_ms, "training": train_ms},
    )
    print(
        f"trained {len(log.steps)} steps: train "
        f"{log.initial_train_loss:.4f} -> {log.final_train_loss:.4f}, "
        f"val {final_val:.4f} (zero baseline {zero_val:.4f})"
    )
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = _parse_geometry(args.geometry)
    events, report = parse_event_stream(args.events, geometry)
    if not report.monotonic:
        events = events.sorted_by_time()
    window_ns = int(round(args.window_us * 1000))
    result: Dict[str, object] = {
        "mode": args.mode,
        "n_events": len(events),
        "geometry": args.geometry,
        "window_us": args.window_us,
    }
    if args.mode == "encode":
        span = int(events.t.max()) + 1 if len(events) else window_ns
        n_frames = max(1, math.ceil(span / window_ns))
        timings = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            encode_stream(events, geometry, 0, window_ns, n_frames)
            timings.append(time.perf_counter() - t0)
        best = min(timings)
        result.update(
            {
                "n_frames": n_frames,
                "encode_ms": best * 1e3,
                "events_per_second": len(events) / best if best > 0 else None,
                "ms_per_window": best * 1e3 / n_frames,
            }
        )
    else:
        if args.gt is None:
            raise UsageError("--mode pair requires --gt")
        frames_per_pair = args.frames_per_pair
        span = int(events.t.max()) + 1 if len(events) else window_ns
        n_frames = max(
            frames_per_pair, math.ceil(span / window_ns)
        )
        n_frames -= n_frames % frames_per_pair
        all_frames = encode_stream(events, geometry, 0, window_ns, n_frames)
        pairs = load_pairs(args.gt, all_frames, frames_per_pair)
        estimator = SearchEstimator()
        per_pair_ms: List[float] = []
        for _ in range(args.repeats):
            for pair in pairs:
                lo = pair.frames[0].t_start
                windowed = events.select(
                    (events.t >= lo) & (events.t < pair.frames[-1].t_end)
                )
                t0 = time.perf_counter()
                frames = encode_stream(
                    windowed, geometry, lo, window_ns, frames_per_pair
                )
                estimator(frames, enclosing_aligned(pair.box_prev))
                per_pair_ms.append((time.perf_counter() - t0) * 1e3)
        arr = np.array(per_pair_ms)
        result.update(
            {
                "n_pairs": len(pairs),
                "repeats": args.repeats,
                "ms_per_pair_mean": float(arr.mean()),
                "ms_per_pair_median": float(np.median(arr)),
                "ms_per_pair_max": float(arr.max()),
            }
        )
    out_path = out_dir / "bench.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(
        out_dir, "bench",
        {"events": str(args.events), "mode": args.mode},
        None, ["bench.json"], {},
    )
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="evtrack", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate events + GT from a scene")
    p_sim.add_argument("scene", help="scene JSON file")
    p_sim.add_argument("out_dir", help="output directory")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the scene seed")
    p_sim.set_defaults(func=cmd_simulate)

    p_enc = sub.add_parser("encode", help="encode an event stream to frames")
    p_enc.add_argument("events", help="event text file (t x y p)")
    p_enc.add_argument("out", help="output .tsltd dump path")
    p_enc.add_argument("--geometry", default="240x180")
    p_enc.add_argument("--t-origin-ns", type=int, default=0)
    p_enc.add_argument("--window-us", type=float, default=6600.0)
    p_enc.add_argument("--frames", type=int, default=None,
                       help="frame count (default: cover the stream)")
    p_enc.add_argument("--pgm-dir", default=None,
                       help="also dump per-frame PGM images here")
    p_enc.set_defaults(func=cmd_encode)

    p_trk = sub.add_parser("track", help="run the pair-tracking protocol")
    p_trk.add_argument("--tsltd", default=None, help="encoded frame dump")
    p_trk.add_argument("--events", default=None, help="raw event text file")
    p_trk.add_argument("--geometry", default="240x180")
    p_trk.add_argument("--t-origin-ns", type=int, default=0)
    p_trk.add_argument("--window-us", type=float, default=6600.0)
    p_trk.add_argument("--gt", required=True, help="ground-truth box CSV")
    p_trk.add_argument("--estimator", choices=("search", "net"),
                       default="search")
    p_trk.add_argument("--model", default=None, help="checkpoint for net")
    p_trk.add_argument("--tau", type=float, default=1.2)
    p_trk.add_argument("--frames-per-pair", type=int, default=5)
    p_trk.add_argument("--n-rep", type=int, default=5)
    p_trk.add_argument("out_dir", help="report output directory")
    p_trk.set_defaults(func=cmd_track)

    p_trn = sub.add_parser("train", help="train the regressor on synthetic pairs")
    p_trn.add_argument("config", help="training config JSON")
    p_trn.add_argument("out_dir", help="checkpoint/log output directory")
    p_trn.set_defaults(func=cmd_train)

    p_bch = sub.add_parser("bench", help="measure encode or per-pair latency")
    p_bch.add_argument("events", help="event text file")
    p_bch.add_argument("out_dir", help="output directory for bench.json")
    p_bch.add_argument("--mode", choices=("encode", "pair"), default="encode")
    p_bch.add_argument("--gt", default=None, help="GT boxes (pair mode)")
    p_bch.add_argument("--geometry", default="240x180")
    p_bch.add_argument("--window-us", type=float, default=6600.0)
    p_bch.add_argument("--frames-per-pair", type=int, default=5)
    p_bch.add_argument("--repeats", type=int, default=3)
    p_bch.set_defaults(func=cmd_bench)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        ParseError,
        TsltdFormatError,
        CheckpointError,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
