"""Command-line entry point: ``handsync <verb> ...``.

Exit codes: 0 success, 1 invalid data, 2 usage, 3 configuration, 4 file I/O.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline, records
from .config import ConfigError, load_config
from .retarget import SHIPPED_HANDS, KinematicChain, chain_fingers
from .simnet import hand_topology, session_clocks
from .spatialcal import CalibrationCaptures, calibrate_hand, reconstruct
from .spectral import energy_landscape

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _ext(args):
    return ".tsv.gz" if getattr(args, "gzip", False) else ".tsv"


# ---------------------------------------------------------------------- verbs


def cmd_simulate(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    session = pipeline.run_simulation(cfg)
    windows = pipeline.run_captures(cfg, session)
    ext = ".tsv.gz" if (args.gzip or cfg.gzip) else ".tsv"
    meta = {"seed": cfg.seed}
    records.write_samples(out / f"samples{ext}", session.samples, meta)
    records.write_anchors(out / f"anchors{ext}", session.anchors, meta)
    records.write_ground_truth(out / f"ground_truth{ext}", session.truth, meta)
    for pose, streams in windows.items():
        records.write_samples(out / f"capture_{pose}{ext}", streams, {**meta, "capture_pose": pose})
    _emit(
        {
            "samples": int(sum(len(s) for s in session.samples.values())),
            "anchors": len(session.anchors),
            "sensors": len(session.samples),
            "out": str(out),
        }
    )


def cmd_sync(args):
    samples, _ = records.read_samples(args.samples)
    anchors, _ = records.read_anchors(args.anchors)
    sync, aligned = pipeline.run_sync(anchors, samples, args.rate, args.baseline)
    truth = None
    if args.truth_config:
        cfg = load_config(args.truth_config)
        truth = session_clocks(pipeline.build_oscillators(cfg, hand_topology()), cfg.duration_s, cfg.seed)
    report = sync.drift_report(truth=truth, cadence=args.cadence)
    records.write_aligned(args.out, aligned, {"baseline": args.baseline})
    if args.drift:
        records.write_drift(args.drift, report, {"baseline": args.baseline})
    doc = {
        "baseline": args.baseline,
        "grid_ticks": int(aligned.grid.count),
        "anchor_exact_fraction": pipeline.anchor_exactness(sync.clock_maps_, anchors),
        "max_abs_final_offset_s": max(abs(v["final_offset"]) for v in report.summary.values()),
    }
    if report.mapping_error:
        doc["max_mapping_error_s"] = report.max_mapping_error()
    _emit(doc)


def _capture_windows(paths):
    windows = {}
    for i, path in enumerate(paths):
        streams, meta = records.read_samples(path)
        pose = meta.get("capture_pose") or ("zero", "start", "end")[i]
        if pose in windows:
            raise ValueError(f"{path}: duplicate capture pose {pose!r}")
        windows[pose] = streams
    missing = {"zero", "start", "end"} - set(windows)
    if missing:
        raise ValueError(f"missing capture poses {sorted(missing)}")
    return windows


def cmd_calibrate(args):
    windows = _capture_windows(args.captures)
    cal = calibrate_hand(CalibrationCaptures.from_windows(windows), threshold=args.threshold)
    pipeline.save_calibration(args.out, cal)
    _emit({"sensors": len(cal.entries), "theta_rad": {str(k): v.theta for k, v in cal.entries.items()}})


def cmd_reconstruct(args):
    aligned, _ = records.read_aligned(args.aligned)
    cal = pipeline.load_calibration(args.calibration)
    hand = reconstruct(aligned, cal, hand_topology())
    records.write_hand_frames(args.out, hand)
    _emit({"segments": len(hand.labels), "ticks": int(hand.grid.count), "valid_fraction": float(hand.valid.mean())})


def _read_series(path):
    header, _ = records.read_records(path)
    kind = header["record_kind"]
    if kind == "aligned":
        series, _ = records.read_aligned(path)
        topo = hand_topology()
        labels = [topo.label_of(s) if s in topo.ids else str(s) for s in series.sensor_ids]
        return series, labels
    if kind == "hand_frames":
        series, _ = records.read_hand_frames(path)
        return series, list(series.labels)
    raise ValueError(f"{path}: expected aligned or hand_frames records, found {kind!r}")


def cmd_spectrum(args):
    series, labels = _read_series(args.input)
    profile = energy_landscape(series, args.fmin, args.window, args.hop, args.mode, labels)
    records.write_spectrum(args.out, profile, {"mode": args.mode})
    if args.heatmap:
        from .plot import spectrum_heatmap

        spectrum_heatmap(profile, args.heatmap)
    peak = {lab: (float(np.nanmax(row)) if np.isfinite(row).any() else None) for lab, row in zip(profile.labels, profile.energy)}
    _emit({"frames": int(len(profile.times)), "f_min_hz": args.fmin, "peak_band_energy": peak})


def _load_chain(spec):
    if spec in SHIPPED_HANDS:
        return SHIPPED_HANDS[spec]()
    return KinematicChain.load(spec)


def cmd_targets(args):
    hand, _ = records.read_hand_frames(args.hand_frames)
    chain = _load_chain(args.hand)
    times, tips = pipeline.retarget_frames(hand, chain, args.frame_rate)
    records.write_targets(args.out, times, tips, {"fingers_named": chain_fingers(chain)})
    _emit({"frames": int(len(times)), "fingers": chain_fingers(chain)})


def cmd_retarget(args):
    chain = _load_chain(args.chain)
    times, targets, _ = records.read_targets(args.targets)
    if targets.shape[1] != chain.n_fingers:
        raise ValueError(f"targets list {targets.shape[1]} fingers, chain has {chain.n_fingers}")
    res = pipeline.run_retarget(chain, targets, args.tol, args.max_iter)
    records.write_joints(args.out, times, chain.joint_names, res.q, res.rmse, res.iterations, res.converged)
    _emit(
        {
            "frames": int(len(times)),
            "rmse_m": {"mean": float(np.mean(res.rmse)), "max": float(np.max(res.rmse))},
            "converged_fraction": float(np.mean(res.converged)),
        }
    )


def cmd_pipeline(args):
    cfg = load_config(args.config)
    if args.baseline:
        cfg = cfg.model_copy(update={"sync": cfg.sync.model_copy(update={"baseline": True})})
    if args.gzip:
        cfg = cfg.model_copy(update={"gzip": True})
    log = (lambda m: print(f"[pipeline] {m}", file=sys.stderr)) if args.verbose else None
    summary = pipeline.run_pipeline(cfg, args.out, log=log)
    summary.pop("_objects", None)
    for name, c in summary["checks"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}: {c['value']:.6g} {c['op']} {c['threshold']:.6g}")
    print(f"summary written to {Path(args.out) / 'summary.json'}")
    if args.strict and not all(c["pass"] for c in summary["checks"].values()):
        return EXIT_DATA
    return EXIT_OK


def cmd_plot(args):
    from .plot import drift_plot, spectrum_heatmap

    header, _ = records.read_records(args.input)
    kind = header["record_kind"]
    if kind == "spectrum":
        profile, _ = records.read_spectrum(args.input)
        spectrum_heatmap(profile, args.out)
    elif kind == "drift":
        offsets, _ = records.read_drift(args.input)
        drift_plot(offsets, args.out)
    else:
        raise ValueError(f"{args.input}: no plot for {kind!r} records (spectrum or drift)")
    print(args.out)


# --------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="handsync", description="Simulated multi-IMU hand capture pipeline.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="simulate samples, anchors, ground truth and calibration captures")
    s.add_argument("--config", required=True, help="session config (JSON)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--gzip", action="store_true", help="gzip record files")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sync", help="fit clock maps from anchors and resample onto the master grid")
    s.add_argument("samples")
    s.add_argument("anchors")
    s.add_argument("--out", required=True, help="aligned record file")
    s.add_argument("--drift", help="drift report record file")
    s.add_argument("--baseline", action="store_true", help="one-time calibration: first anchor only")
    s.add_argument("--rate", type=float, default=800.0, help="grid rate in Hz (default 800)")
    s.add_argument("--cadence", type=float, default=1.0, help="drift report sampling cadence in seconds")
    s.add_argument("--truth-config", help="config of a simulated session; adds true mapping errors")
    s.set_defaults(func=cmd_sync)

    s = sub.add_parser("calibrate", help="solve per-sensor heading and mount from capture files")
    s.add_argument("captures", nargs=3, help="zero, start and end capture sample files")
    s.add_argument("--out", required=True, help="calibration document (JSON)")
    s.add_argument("--threshold", type=float, default=0.05, help="minimum sin(alpha) accepted")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("reconstruct", help="apply a calibration to an aligned series")
    s.add_argument("aligned")
    s.add_argument("calibration")
    s.add_argument("--out", required=True, help="hand-frame record file")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("spectrum", help="band-energy landscape of an aligned or hand-frame file")
    s.add_argument("input")
    s.add_argument("--out", required=True, help="spectrum record file")
    s.add_argument("--fmin", type=float, default=100.0, help="band threshold in Hz (strict)")
    s.add_argument("--window", type=int, default=256, help="Hann window length in samples")
    s.add_argument("--hop", type=int, default=16, help="hop in samples")
    s.add_argument("--mode", choices=("auto", "gyro", "orientation"), default="auto")
    s.add_argument("--heatmap", help="also render a PNG heatmap (needs matplotlib)")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("targets", help="wrist-frame fingertip targets from a hand-frame file")
    s.add_argument("hand_frames")
    s.add_argument("--hand", default="four_finger", help="shipped hand name or chain file; selects fingers")
    s.add_argument("--frame-rate", type=float, default=10.0, help="target frames per second")
    s.add_argument("--out", required=True, help="targets record file")
    s.set_defaults(func=cmd_targets)

    s = sub.add_parser("retarget", help="solve joint angles for a fingertip target stream")
    s.add_argument("chain", help="chain file (JSON) or shipped hand: " + ", ".join(SHIPPED_HANDS))
    s.add_argument("targets")
    s.add_argument("--out", required=True, help="joint record file")
    s.add_argument("--tol", type=float, default=1e-6, help="per-finger error tolerance (m)")
    s.add_argument("--max-iter", type=int, default=100)
    s.set_defaults(func=cmd_retarget)

    s = sub.add_parser("pipeline", help="run every stage and write a summary report")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--baseline", action="store_true", help="use the one-time calibration baseline")
    s.add_argument("--gzip", action="store_true")
    s.add_argument("--strict", action="store_true", help="exit 1 if any check fails")
    s.add_argument("-v", "--verbose", action="store_true", help="log stages to stderr")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("plot", help="render a spectrum heatmap or drift plot (needs matplotlib)")
    s.add_argument("input")
    s.add_argument("--out", required=True, help="PNG path")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
