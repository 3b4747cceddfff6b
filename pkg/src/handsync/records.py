"""Line-delimited text record files.

Layout: line 1 is a JSON header ``{"format_version", "record_kind",
"fields": [[name, type], ...], "meta": {...}}``; every following line is one
record with tab-separated values in field order. Types are ``int``, ``float``
and ``str``. Timestamps are integer microseconds. Floats are written in
shortest round-trip form, so reading returns bit-identical values (NaN marks
masked entries). A ``.gz`` suffix selects gzip with a zeroed mtime, keeping
output byte-reproducible.
"""
from __future__ import annotations

import gzip
import io
import json
import math
from pathlib import Path

import numpy as np
import polars as pl

from .simnet import AnchorRecord, GroundTruthLog, SampleStream
from .spatialcal import HandFrameSeries
from .spectral import BandEnergyProfile
from .timesync import AlignedSeries, UniformGrid

FORMAT_VERSION = 1
RECORD_KINDS = ("sample", "anchor", "ground_truth", "aligned", "hand_frames", "drift", "spectrum", "targets", "joints")
_DTYPES = {"int": pl.Int64, "float": pl.Float64, "str": pl.Utf8}

Q = ["qw", "qx", "qy", "qz"]
G = ["gx", "gy", "gz"]
W = ["wx", "wy", "wz"]

FIELDS = {
    "sample": [("sensor_id", "int"), ("seq", "int"), ("t_local_us", "int")] + [(c, "float") for c in Q + G],
    "anchor": [("anchor_id", "int"), ("t_master_us", "int"), ("sensor_id", "int"), ("t_local_us", "int")],
    "ground_truth": [("t_master_us", "int"), ("segment_label", "str")] + [(c, "float") for c in Q + W],
    "aligned": [("t_master_us", "int"), ("sensor_id", "int"), ("valid", "int")] + [(c, "float") for c in Q + G],
    "hand_frames": [("t_master_us", "int"), ("segment_label", "str"), ("valid", "int")] + [(c, "float") for c in Q],
    "drift": [("sensor_id", "int"), ("t_master_s", "float"), ("offset_s", "float")],
    "spectrum": [("frame_time_s", "float"), ("segment_label", "str"), ("energy", "float")],
    "targets": [("frame_time_s", "float"), ("finger_index", "int"), ("x", "float"), ("y", "float"), ("z", "float")],
}
JOINT_FIXED = [("frame_time_s", "float"), ("rmse_m", "float"), ("iterations", "int"), ("converged", "int")]


class RecordFormatError(ValueError):
    """A record file does not match its declared header."""


# ------------------------------------------------------------------ raw level


def _open_write(path):
    path = Path(path)
    raw = open(path, "wb")
    if path.suffix == ".gz":
        return gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0), raw
    return raw, None


def write_records(path, kind, frame, meta=None, fields=None):
    """Write ``frame`` (polars DataFrame) with a header; columns follow ``fields``."""
    if kind not in RECORD_KINDS:
        raise ValueError(f"unknown record kind {kind!r}")
    fields = list(fields if fields is not None else FIELDS[kind])
    names = [n for n, _ in fields]
    frame = frame.select(names).cast({n: _DTYPES[t] for n, t in fields})
    header = {"format_version": FORMAT_VERSION, "record_kind": kind, "fields": [list(f) for f in fields]}
    if meta:
        header["meta"] = meta
    fh, raw = _open_write(path)
    try:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        body = io.BytesIO()
        frame.write_csv(body, separator="\t", include_header=False, quote_style="never")
        fh.write(body.getvalue())
    finally:
        fh.close()
        if raw is not None:
            raw.close()


def _read_bytes(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _locate_bad_line(body, fields, offset=2):
    parsers = {"int": int, "float": float, "str": str}
    for i, line in enumerate(body.decode().splitlines()):
        parts = line.split("\t")
        if len(parts) != len(fields):
            return f"line {i + offset}: expected {len(fields)} fields, found {len(parts)}"
        for value, (name, typ) in zip(parts, fields):
            try:
                parsers[typ](value)
            except ValueError:
                return f"line {i + offset}: field {name!r} cannot parse {value!r} as {typ}"
    return None


def read_records(path, kind=None):
    """Return ``(header, frame)``; validates every line against the header."""
    data = _read_bytes(path)
    head, sep, body = data.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"{path}: line 1 is not a JSON header ({exc.msg})") from None
    for key in ("format_version", "record_kind", "fields"):
        if key not in header:
            raise RecordFormatError(f"{path}: header lacks {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise RecordFormatError(f"{path}: unsupported format_version {header['format_version']}")
    if kind is not None and header["record_kind"] != kind:
        raise RecordFormatError(f"{path}: expected {kind!r} records, found {header['record_kind']!r}")
    fields = [tuple(f) for f in header["fields"]]
    if any(len(f) != 2 or f[1] not in _DTYPES for f in fields):
        raise RecordFormatError(f"{path}: malformed field list")
    schema = {n: _DTYPES[t] for n, t in fields}
    if not body.strip():
        return header, pl.DataFrame(schema=schema)
    try:
        frame = pl.read_csv(
            io.BytesIO(body), separator="\t", has_header=False, schema=schema, quote_char=None, null_values=None
        )
        if frame.null_count().sum_horizontal().item():
            raise ValueError("missing values")
    except Exception as exc:
        detail = _locate_bad_line(body, fields) or str(exc).splitlines()[0]
        raise RecordFormatError(f"{path}: {detail}") from None
    return header, frame


# ------------------------------------------------------------- typed helpers


def _cols(frame, names):
    return np.column_stack([frame[n].to_numpy() for n in names])


def write_samples(path, samples, meta=None):
    parts = []
    for sid in sorted(samples):
        s = samples[sid]
        n = len(s)
        cols = {"sensor_id": np.full(n, sid, dtype=np.int64), "seq": s.seq, "t_local_us": s.t_local}
        cols.update({c: s.quat[:, i] for i, c in enumerate(Q)})
        cols.update({c: s.gyro[:, i] for i, c in enumerate(G)})
        parts.append(pl.DataFrame(cols))
    write_records(path, "sample", pl.concat(parts) if parts else pl.DataFrame(schema={n: _DTYPES[t] for n, t in FIELDS["sample"]}), meta)


def read_samples(path):
    """``({sensor_id: SampleStream}, meta)``; rows must be grouped per sensor."""
    header, frame = read_records(path, "sample")
    out = {}
    sid_col = frame["sensor_id"].to_numpy()
    ids, starts = np.unique(sid_col, return_index=True)
    for sid, start in zip(ids, starts):
        part = frame.slice(int(start), int(np.sum(sid_col == sid)))
        if np.any(part["sensor_id"].to_numpy() != sid):
            raise RecordFormatError(f"{path}: rows for sensor {sid} are not contiguous")
        stream = SampleStream(
            int(sid), part["seq"].to_numpy(), part["t_local_us"].to_numpy(), _cols(part, Q), _cols(part, G)
        )
        try:
            out[int(sid)] = stream.validate()
        except ValueError as exc:
            raise RecordFormatError(f"{path}: {exc}") from None
    return out, header.get("meta", {})


def write_anchors(path, anchors, meta=None):
    rows = [(a.anchor_id, a.t_master, sid, a.latched[sid]) for a in anchors for sid in sorted(a.latched)]
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    names = [n for n, _ in FIELDS["anchor"]]
    write_records(path, "anchor", pl.DataFrame({n: arr[:, i] for i, n in enumerate(names)}), meta)


def read_anchors(path):
    header, frame = read_records(path, "anchor")
    anchors, order = {}, []
    for aid, tm, sid, tl in frame.iter_rows():
        if aid not in anchors:
            anchors[aid] = (tm, {})
            order.append(aid)
        elif anchors[aid][0] != tm:
            raise RecordFormatError(f"{path}: anchor {aid} has inconsistent master times")
        anchors[aid][1][sid] = tl
    return [AnchorRecord(aid, anchors[aid][0], anchors[aid][1]) for aid in order], header.get("meta", {})


def write_ground_truth(path, truth, meta=None):
    S, N = truth.quat.shape[:2]
    cols = {
        "t_master_us": np.tile(truth.t_master, S),
        "segment_label": np.repeat(np.array(truth.labels, dtype=object), N),
    }
    cols.update({c: truth.quat[..., i].reshape(-1) for i, c in enumerate(Q)})
    cols.update({c: truth.omega[..., i].reshape(-1) for i, c in enumerate(W)})
    write_records(path, "ground_truth", pl.DataFrame(cols), {**(meta or {}), "labels": list(truth.labels)})


def _segment_blocks(path, frame, labels, n):
    if len(frame) != len(labels) * n:
        raise RecordFormatError(f"{path}: expected {len(labels)} x {n} rows, found {len(frame)}")
    got = frame["segment_label"].to_numpy().reshape(len(labels), n) if n else None
    if n and not all(np.all(got[i] == lab) for i, lab in enumerate(labels)):
        raise RecordFormatError(f"{path}: segment blocks do not follow the header's label order")


def read_ground_truth(path):
    header, frame = read_records(path, "ground_truth")
    labels = header.get("meta", {}).get("labels") or list(dict.fromkeys(frame["segment_label"].to_list()))
    S = len(labels)
    N = len(frame) // S if S else 0
    _segment_blocks(path, frame, labels, N)
    quat = _cols(frame, Q).reshape(S, N, 4)
    omega = _cols(frame, W).reshape(S, N, 3)
    t = frame["t_master_us"].to_numpy()[:N]
    return GroundTruthLog(t, labels, quat, omega), header.get("meta", {})


def _grid_meta(grid):
    return {"t_start_us": int(grid.t_start), "rate_hz": float(grid.rate), "count": int(grid.count)}


def _grid_from(meta, path):
    try:
        return UniformGrid(int(meta["t_start_us"]), float(meta["rate_hz"]), int(meta["count"]))
    except KeyError as exc:
        raise RecordFormatError(f"{path}: header meta lacks grid field {exc}") from None


def write_aligned(path, aligned, meta=None):
    S, N = aligned.valid.shape
    cols = {
        "t_master_us": np.tile(np.rint(aligned.grid.times_us).astype(np.int64), S),
        "sensor_id": np.repeat(np.asarray(aligned.sensor_ids, dtype=np.int64), N),
        "valid": aligned.valid.reshape(-1).astype(np.int64),
    }
    cols.update({c: aligned.quat[..., i].reshape(-1) for i, c in enumerate(Q)})
    cols.update({c: aligned.gyro[..., i].reshape(-1) for i, c in enumerate(G)})
    m = {**(meta or {}), "grid": _grid_meta(aligned.grid), "sensor_ids": [int(s) for s in aligned.sensor_ids]}
    write_records(path, "aligned", pl.DataFrame(cols), m)


def read_aligned(path):
    header, frame = read_records(path, "aligned")
    meta = header.get("meta", {})
    grid = _grid_from(meta.get("grid", {}), path)
    ids = [int(s) for s in meta.get("sensor_ids", [])]
    S, N = len(ids), grid.count
    if len(frame) != S * N:
        raise RecordFormatError(f"{path}: expected {S} x {N} rows, found {len(frame)}")
    sid = frame["sensor_id"].to_numpy().reshape(S, N) if N else np.zeros((S, 0))
    if N and not all(np.all(sid[i] == s) for i, s in enumerate(ids)):
        raise RecordFormatError(f"{path}: sensor blocks do not follow the header's sensor order")
    return (
        AlignedSeries(
            grid,
            ids,
            _cols(frame, Q).reshape(S, N, 4),
            _cols(frame, G).reshape(S, N, 3),
            frame["valid"].to_numpy().reshape(S, N).astype(bool),
        ),
        meta,
    )


def write_hand_frames(path, frames, meta=None):
    S, N = frames.valid.shape
    cols = {
        "t_master_us": np.tile(np.rint(frames.grid.times_us).astype(np.int64), S),
        "segment_label": np.repeat(np.array(frames.labels, dtype=object), N),
        "valid": frames.valid.reshape(-1).astype(np.int64),
    }
    cols.update({c: frames.quat[..., i].reshape(-1) for i, c in enumerate(Q)})
    m = {**(meta or {}), "grid": _grid_meta(frames.grid), "labels": list(frames.labels)}
    write_records(path, "hand_frames", pl.DataFrame(cols), m)


def read_hand_frames(path):
    header, frame = read_records(path, "hand_frames")
    meta = header.get("meta", {})
    grid = _grid_from(meta.get("grid", {}), path)
    labels = list(meta.get("labels", []))
    _segment_blocks(path, frame, labels, grid.count)
    S, N = len(labels), grid.count
    return (
        HandFrameSeries(grid, labels, _cols(frame, Q).reshape(S, N, 4), frame["valid"].to_numpy().reshape(S, N).astype(bool)),
        meta,
    )


def write_drift(path, report, meta=None):
    off = report.offsets
    frame = pl.DataFrame({"sensor_id": off[:, 0].astype(np.int64), "t_master_s": off[:, 1], "offset_s": off[:, 2]})
    m = dict(meta or {})
    m["summary"] = {str(k): v for k, v in report.summary.items()}
    if report.mapping_error:
        m["mapping_error"] = {str(k): v for k, v in report.mapping_error.items()}
    write_records(path, "drift", frame, m)


def read_drift(path):
    header, frame = read_records(path, "drift")
    return _cols(frame, ["sensor_id", "t_master_s", "offset_s"]), header.get("meta", {})


def write_spectrum(path, profile, meta=None):
    S, T = profile.energy.shape
    frame = pl.DataFrame(
        {
            "frame_time_s": np.tile(profile.times, S),
            "segment_label": np.repeat(np.array(profile.labels, dtype=object), T),
            "energy": profile.energy.reshape(-1),
        }
    )
    m = {**(meta or {}), "labels": list(profile.labels), "f_min_hz": float(profile.f_min), "frames": int(T)}
    write_records(path, "spectrum", frame, m)


def read_spectrum(path):
    header, frame = read_records(path, "spectrum")
    meta = header.get("meta", {})
    labels = list(meta.get("labels", []))
    T = int(meta.get("frames", len(frame) // max(len(labels), 1)))
    _segment_blocks(path, frame, labels, T)
    energy = frame["energy"].to_numpy().reshape(len(labels), T)
    times = frame["frame_time_s"].to_numpy()[:T]
    return BandEnergyProfile(times, labels, energy, float(meta.get("f_min_hz", math.nan))), meta


def write_targets(path, times, tips, meta=None):
    """``tips`` is (T, F, 3) in meters, wrist frame."""
    tips = np.asarray(tips, dtype=float)
    T, F, _ = tips.shape
    frame = pl.DataFrame(
        {
            "frame_time_s": np.repeat(np.asarray(times, dtype=float), F),
            "finger_index": np.tile(np.arange(F, dtype=np.int64), T),
            "x": tips[..., 0].reshape(-1),
            "y": tips[..., 1].reshape(-1),
            "z": tips[..., 2].reshape(-1),
        }
    )
    write_records(path, "targets", frame, {**(meta or {}), "fingers": int(F)})


def read_targets(path):
    """``(times (T,), tips (T, F, 3), meta)``; each frame lists fingers 0..F-1."""
    header, frame = read_records(path, "targets")
    meta = header.get("meta", {})
    fi = frame["finger_index"].to_numpy()
    F = int(meta.get("fingers", fi.max() + 1 if len(fi) else 0))
    if F <= 0 or len(frame) % F:
        raise RecordFormatError(f"{path}: row count {len(frame)} is not a multiple of {F} fingers")
    T = len(frame) // F
    if np.any(fi.reshape(T, F) != np.arange(F)):
        raise RecordFormatError(f"{path}: every frame must list finger_index 0..{F - 1} in order")
    times = frame["frame_time_s"].to_numpy().reshape(T, F)
    if np.any(times != times[:, :1]):
        raise RecordFormatError(f"{path}: fingers of one frame carry different frame times")
    return times[:, 0], _cols(frame, ["x", "y", "z"]).reshape(T, F, 3), meta


def write_joints(path, times, joint_names, q, rmse, iterations, converged, meta=None):
    names = [f"q:{n}" for n in joint_names]
    cols = {
        "frame_time_s": np.asarray(times, dtype=float),
        "rmse_m": np.asarray(rmse, dtype=float),
        "iterations": np.asarray(iterations, dtype=np.int64),
        "converged": np.asarray(converged).astype(np.int64),
    }
    q = np.asarray(q, dtype=float)
    cols.update({n: q[:, i] for i, n in enumerate(names)})
    fields = JOINT_FIXED + [(n, "float") for n in names]
    write_records(path, "joints", pl.DataFrame(cols), meta, fields=fields)


def read_joints(path):
    header, frame = read_records(path, "joints")
    qcols = [n for n, _ in header["fields"] if n.startswith("q:")]
    return {
        "frame_time_s": frame["frame_time_s"].to_numpy(),
        "rmse_m": frame["rmse_m"].to_numpy(),
        "iterations": frame["iterations"].to_numpy(),
        "converged": frame["converged"].to_numpy().astype(bool),
        "joint_names": [n[2:] for n in qcols],
        "q": _cols(frame, qcols) if qcols else np.zeros((len(frame), 0)),
        "meta": header.get("meta", {}),
    }
