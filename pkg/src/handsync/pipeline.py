"""Stage functions and the end-to-end run behind the command line.

Every stage is a plain function over in-memory objects; :func:`run_pipeline`
chains them and writes each intermediate as a record file. Outputs depend
only on the configuration (all randomness flows from ``cfg.seed``), and the
summary holds no wall-clock data, so repeated runs are byte-identical.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import records
from .geom import quat_distance, quat_to_matrix
from .retarget import SHIPPED_HANDS, Retargeter, chain_fingers, human_fingertips
from .simnet import (
    CAPTURE_POSES,
    OscillatorModel,
    default_oscillators,
    gen_motion,
    hand_topology,
    simulate_captures,
    simulate_session,
)
from .spatialcal import CalibrationCaptures, SpatialCalibration, calibrate_hand, reconstruct
from .spectral import energy_landscape
from .timesync import ClockSynchronizer, local_to_master

SYNC_BOUND_S = 0.625e-3
RECON_BOUND_DEG = 0.5
DIVERGENCE_WINDOW_S = 10.0


# ------------------------------------------------------------------- building


def build_oscillators(cfg, topology):
    oc = cfg.oscillators
    oscs = default_oscillators(
        topology,
        cfg.seed,
        offset_range=oc.offset_range_ppm,
        random_walk=oc.random_walk_ppm,
        latch_jitter=oc.latch_jitter_s,
        initial_offset_range=oc.initial_offset_range_s,
        nominal_rate=oc.nominal_rate_hz,
    )
    for sid, ov in oc.overrides.items():
        if sid not in oscs:
            raise ValueError(f"oscillators.overrides.{sid}: no such sensor")
        base = oscs[sid]
        oscs[sid] = OscillatorModel(
            base.nominal_rate,
            base.freq_offset if ov.freq_offset_ppm is None else ov.freq_offset_ppm,
            base.random_walk if ov.random_walk_ppm is None else ov.random_walk_ppm,
            base.latch_jitter if ov.latch_jitter_s is None else ov.latch_jitter_s,
            base.initial_offset if ov.initial_offset_s is None else ov.initial_offset_s,
        )
    return oscs


def build_motion(cfg):
    return gen_motion(cfg.motion.kind, cfg.duration_s, **cfg.motion.params)


def run_simulation(cfg, topology=None):
    topology = topology or hand_topology()
    return simulate_session(
        topology,
        build_oscillators(cfg, topology),
        build_motion(cfg),
        anchor_period=cfg.anchor_period_s,
        seed=cfg.seed,
        orientation_noise=math.radians(cfg.noise.orientation_deg),
        gyro_noise=cfg.noise.gyro_rad_s,
        truth_rate=cfg.sync.rate_hz,
    )


def run_captures(cfg, session):
    c = cfg.calibration
    return simulate_captures(
        session.topology,
        session.mounting,
        alpha=math.radians(c.alpha_deg),
        window=c.window_s,
        rate=cfg.oscillators.nominal_rate_hz,
        noise=math.radians(cfg.noise.capture_deg),
        seed=cfg.seed,
        start_pitch=math.radians(c.start_pitch_deg),
    )


def run_sync(anchors, samples, rate=800.0, baseline=False):
    sync = ClockSynchronizer(rate=rate, baseline=baseline).fit(anchors)
    return sync, sync.transform(samples)


def anchor_exactness(maps, anchors):
    """Fraction of (anchor, sensor) pairs mapped back to their exact master time."""
    hits = total = 0
    for a in anchors:
        for sid, tl in a.latched.items():
            total += 1
            hits += int(local_to_master(maps[sid], tl) == a.t_master)
    return hits / total if total else 1.0


# -------------------------------------------------------------------- metrics


def reconstruction_error(hand, truth):
    """Geodesic error (rad), (S, N) with NaN at invalid ticks, on the common ticks."""
    n = min(hand.grid.count, len(truth.t_master))
    err = np.full((len(hand.labels), n), np.nan)
    for i, label in enumerate(hand.labels):
        j = truth.labels.index(label)
        ok = hand.valid[i, :n]
        err[i, ok] = quat_distance(hand.quat[i, :n][ok], truth.quat[j, :n][ok])
    return err


def finger_pitch_divergence(hand):
    """Spread (max - min) of pitch about world x across finger segments, per tick."""
    idx = [i for i, lab in enumerate(hand.labels) if lab.split("_")[0] in ("thumb", "index", "middle", "ring", "pinky")]
    R = quat_to_matrix(hand.quat[idx])
    pitch = np.arctan2(R[..., 2, 1], R[..., 1, 1])
    ok = hand.valid[idx].all(axis=0)
    div = np.full(hand.grid.count, np.nan)
    div[ok] = pitch[:, ok].max(axis=0) - pitch[:, ok].min(axis=0)
    return div


def _nanmax_rows(x):
    finite = np.isfinite(x)
    m = np.max(np.where(finite, x, -np.inf), axis=0)
    return np.where(finite.any(axis=0), m, np.nan)


def windowed_max(times, values, window=DIVERGENCE_WINDOW_S):
    """Max of ``values`` over consecutive windows; NaNs ignored."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = int(math.floor((times[-1] - times[0]) / window + 1e-9)) if len(times) else 0
    out = []
    for k in range(max(n, 1)):
        sel = (times >= times[0] + k * window) & (times < times[0] + (k + 1) * window)
        if k == max(n, 1) - 1:
            sel |= times >= times[0] + k * window
        v = values[sel]
        v = v[np.isfinite(v)]
        out.append(float(v.max()) if len(v) else math.nan)
    return out


def retarget_frames(hand, chain, frame_rate=10.0):
    """Wrist-frame fingertip targets at ``frame_rate`` from valid hand-frame ticks."""
    tips, valid = human_fingertips(hand, chain_fingers(chain))
    stride = max(int(round(hand.grid.rate / frame_rate)), 1)
    idx = np.arange(0, hand.grid.count, stride)
    idx = idx[valid[idx]]
    return hand.grid.times[idx], tips[idx]


def run_retarget(chain, targets, tol=1e-6, max_iter=100):
    est = Retargeter(chain, tol=tol, max_iter=max_iter).fit()
    return est.solve(targets)


# ------------------------------------------------------------------- pipeline


def _stats(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if not len(x):
        return {"max": math.nan, "mean": math.nan}
    return {"max": float(x.max()), "mean": float(x.mean())}


def _check(value, threshold, op="<"):
    ok = bool(value < threshold) if op == "<" else bool(value >= threshold)
    return {"value": value, "threshold": threshold, "op": op, "pass": ok}


def output_paths(outdir, gz=False):
    ext = ".tsv.gz" if gz else ".tsv"
    out = Path(outdir)
    names = ["samples", "anchors", "ground_truth", "aligned", "drift", "hand_frames", "spectrum", "targets", "joints"]
    paths = {n: out / f"{n}{ext}" for n in names}
    for pose in CAPTURE_POSES:
        paths[f"capture_{pose}"] = out / f"capture_{pose}{ext}"
    paths["calibration"] = out / "calibration.json"
    paths["chain"] = out / "chain.json"
    paths["summary"] = out / "summary.json"
    return paths


def save_calibration(path, calibration):
    with open(path, "w") as fh:
        json.dump(calibration.to_dict(), fh, indent=2)
        fh.write("\n")


def load_calibration(path):
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return SpatialCalibration.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed calibration document ({exc})") from None


def run_pipeline(cfg, outdir, write=True, log=None):
    """Run every stage; returns the summary dict (also written as JSON)."""
    say = log or (lambda msg: None)
    paths = output_paths(outdir, cfg.gzip)
    if write:
        Path(outdir).mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed}

    say("simulate")
    session = run_simulation(cfg)
    windows = run_captures(cfg, session)
    if write:
        records.write_samples(paths["samples"], session.samples, meta)
        records.write_anchors(paths["anchors"], session.anchors, meta)
        records.write_ground_truth(paths["ground_truth"], session.truth, meta)
        for pose, streams in windows.items():
            records.write_samples(paths[f"capture_{pose}"], streams, {**meta, "capture_pose": pose})

    say("sync")
    sync, aligned = run_sync(session.anchors, session.samples, cfg.sync.rate_hz, cfg.sync.baseline)
    report = sync.drift_report(truth=session.clocks, cadence=1.0)
    if write:
        records.write_aligned(paths["aligned"], aligned, {**meta, "baseline": cfg.sync.baseline})
        records.write_drift(paths["drift"], report, {**meta, "baseline": cfg.sync.baseline})

    say("calibrate")
    calibration = calibrate_hand(CalibrationCaptures.from_windows(windows), session.topology.ids, cfg.calibration.threshold)
    hand = reconstruct(aligned, calibration, session.topology)
    if write:
        save_calibration(paths["calibration"], calibration)
        records.write_hand_frames(paths["hand_frames"], hand, meta)

    say("spectrum")
    sp = cfg.spectrum
    source = hand if sp.source == "hand_frames" else aligned
    labels = [session.topology.label_of(s) for s in aligned.sensor_ids]
    profile = energy_landscape(source, sp.f_min_hz, sp.window_length, sp.hop, sp.mode, labels)
    if write:
        records.write_spectrum(paths["spectrum"], profile, {**meta, "source": sp.source, "mode": sp.mode})

    say("retarget")
    chain = SHIPPED_HANDS[cfg.retarget.hand]()
    times, targets = retarget_frames(hand, chain, cfg.retarget.frame_rate_hz)
    solved = run_retarget(chain, targets, cfg.retarget.tol, cfg.retarget.max_iter) if len(targets) else None
    if write:
        chain.save(paths["chain"])
        records.write_targets(paths["targets"], times, targets, {**meta, "fingers_named": chain_fingers(chain)})
        if solved is not None:
            records.write_joints(
                paths["joints"], times, chain.joint_names, solved.q, solved.rmse, solved.iterations, solved.converged, meta
            )

    say("summary")
    err = reconstruction_error(hand, session.truth)
    div = finger_pitch_divergence(hand)
    t = hand.grid.times
    n = err.shape[1]
    peak = _nanmax_rows(profile.energy.T)
    summary = {
        "config": cfg.model_dump(mode="json"),
        "counts": {
            "samples": int(sum(len(s) for s in session.samples.values())),
            "anchors": len(session.anchors),
            "grid_ticks": int(aligned.grid.count),
            "retarget_frames": int(len(targets)),
        },
        "sync": {
            "baseline": cfg.sync.baseline,
            "max_mapping_error_s": report.max_mapping_error(),
            "per_sensor_max_mapping_error_s": {str(k): v["max_abs"] for k, v in report.mapping_error.items()},
            "anchor_exact_fraction": anchor_exactness(sync.clock_maps_, session.anchors),
            "max_abs_final_offset_s": max(abs(v["final_offset"]) for v in report.summary.values()),
        },
        "reconstruction": {
            "per_segment_max_error_deg": {lab: _stats(np.degrees(err[i]))["max"] for i, lab in enumerate(hand.labels)},
            "max_error_deg": _stats(np.degrees(err))["max"],
            "mean_error_deg": _stats(np.degrees(err))["mean"],
            "windowed_max_error_deg": [math.degrees(v) for v in windowed_max(t[:n], _nanmax_rows(err))],
            "windowed_max_finger_divergence_deg": [math.degrees(v) for v in windowed_max(t, div)],
            "window_s": DIVERGENCE_WINDOW_S,
        },
        "spectrum": {
            "f_min_hz": sp.f_min_hz,
            "frames": int(len(profile.times)),
            "peak_band_energy": {lab: float(v) if np.isfinite(v) else None for lab, v in zip(profile.labels, peak)},
        },
        "retarget": {
            "hand": cfg.retarget.hand,
            "frames": int(len(targets)),
            "rmse_m": _stats(solved.rmse) if solved is not None else None,
            "converged_fraction": float(np.mean(solved.converged)) if solved is not None else None,
        },
    }
    checks = {"anchor_exactness": _check(summary["sync"]["anchor_exact_fraction"], 1.0, ">=")}
    if not cfg.sync.baseline:
        checks["sub_frame_sync"] = _check(summary["sync"]["max_mapping_error_s"], SYNC_BOUND_S)
        checks["reconstruction_deg"] = _check(summary["reconstruction"]["max_error_deg"], RECON_BOUND_DEG)
    summary["checks"] = checks
    if write:
        with open(paths["summary"], "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    summary["_objects"] = {
        "session": session,
        "aligned": aligned,
        "hand": hand,
        "calibration": calibration,
        "profile": profile,
        "report": report,
        "retarget": solved,
        "sync": sync,
    }
    return summary
