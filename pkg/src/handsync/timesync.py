"""Broadcast-anchor temporal calibration.

Each sensor's local clock is mapped to master time by a piecewise-linear
function through its latched anchor pairs. Asynchronous samples are then
placed on a strict uniform master grid: slerp for orientation, linear
interpolation for the gyro, and no extrapolation past the data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geom import slerp


class CorruptAnchorStream(ValueError):
    """Latched timestamps are not strictly increasing for some sensor."""


@dataclass(frozen=True, eq=False)
class ClockMap:
    """Piecewise-linear local -> master map, exact at every anchor pair.

    Both coordinates are microseconds. Outside the anchor range the nearest
    segment's slope is used; a single pair extrapolates with slope 1.
    """

    sensor_id: int
    t_local: np.ndarray
    t_master: np.ndarray

    def __post_init__(self):
        tl = np.asarray(self.t_local, dtype=np.int64).reshape(-1)
        tm = np.asarray(self.t_master, dtype=np.int64).reshape(-1)
        if len(tl) == 0 or len(tl) != len(tm):
            raise ValueError("clock map needs >= 1 (t_local, t_master) pair of equal length")
        if np.any(np.diff(tl) <= 0) or np.any(np.diff(tm) <= 0):
            raise CorruptAnchorStream(f"sensor {self.sensor_id}: anchor pairs must be strictly increasing")
        object.__setattr__(self, "t_local", tl)
        object.__setattr__(self, "t_master", tm)

    @property
    def slopes(self):
        if len(self.t_local) < 2:
            return np.ones(1)
        return np.diff(self.t_master).astype(float) / np.diff(self.t_local).astype(float)

    def __len__(self):
        return len(self.t_local)


def _sorted_anchors(anchors):
    return sorted(anchors, key=lambda a: (a.t_master, a.anchor_id))


def fit_clock_map(anchors, sensor_id):
    """Clock map whose pairs are exactly ``(latched, t_master)`` per anchor."""
    rows = [(a.latched[sensor_id], a.t_master) for a in _sorted_anchors(anchors) if sensor_id in a.latched]
    if not rows:
        raise ValueError(f"no anchor contains sensor {sensor_id}")
    tl, tm = np.array(rows, dtype=np.int64).T
    if np.any(np.diff(tl) <= 0):
        bad = int(np.argmax(np.diff(tl) <= 0))
        raise CorruptAnchorStream(
            f"sensor {sensor_id}: latched timestamps not strictly increasing at anchor index {bad + 1}"
        )
    return ClockMap(sensor_id, tl, tm)


def one_time_baseline(anchors, sensor_id):
    """Baseline map from the first anchor only (slope 1 thereafter)."""
    full = fit_clock_map(anchors, sensor_id)
    return ClockMap(sensor_id, full.t_local[:1], full.t_master[:1])


def local_to_master(clock_map, t_local):
    """Master time (float microseconds) for local timestamps (microseconds)."""
    x = np.asarray(t_local, dtype=float)
    xp = clock_map.t_local.astype(float)
    fp = clock_map.t_master.astype(float)
    if len(xp) == 1:
        return fp[0] + (x - xp[0])
    out = np.interp(x, xp, fp)
    s = clock_map.slopes
    out = np.where(x < xp[0], fp[0] + (x - xp[0]) * s[0], out)
    out = np.where(x > xp[-1], fp[-1] + (x - xp[-1]) * s[-1], out)
    return out


def master_to_local(clock_map, t_master):
    """Inverse of :func:`local_to_master` (float microseconds)."""
    y = np.asarray(t_master, dtype=float)
    xp = clock_map.t_local.astype(float)
    fp = clock_map.t_master.astype(float)
    if len(xp) == 1:
        return xp[0] + (y - fp[0])
    out = np.interp(y, fp, xp)
    s = clock_map.slopes
    out = np.where(y < fp[0], xp[0] + (y - fp[0]) / s[0], out)
    out = np.where(y > fp[-1], xp[-1] + (y - fp[-1]) / s[-1], out)
    return out


# ------------------------------------------------------------------ resampling


@dataclass(frozen=True)
class UniformGrid:
    """Tick ``k`` sits at ``t_start + k * 1e6 / rate`` microseconds."""

    t_start: int = 0
    rate: float = 800.0
    count: int = 0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("grid rate must be positive")
        if self.count < 0:
            raise ValueError("grid count must be non-negative")

    @classmethod
    def covering(cls, duration, rate=800.0, t_start=0):
        return cls(int(t_start), float(rate), int(np.floor(duration * rate + 1e-9)) + 1)

    @property
    def times_us(self):
        return self.t_start + np.arange(self.count) * (1e6 / self.rate)

    @property
    def times(self):
        return self.times_us / 1e6


@dataclass(eq=False)
class AlignedSeries:
    """Per-sensor orientation and gyro on a common master grid."""

    grid: UniformGrid
    sensor_ids: list
    quat: np.ndarray  # (S, N, 4)
    gyro: np.ndarray  # (S, N, 3)
    valid: np.ndarray  # (S, N) bool

    def __post_init__(self):
        S, N = len(self.sensor_ids), self.grid.count
        if self.quat.shape != (S, N, 4) or self.gyro.shape != (S, N, 3) or self.valid.shape != (S, N):
            raise ValueError("aligned arrays must match (sensors, grid.count)")

    def index(self, sensor_id):
        return self.sensor_ids.index(sensor_id)


def _check_sorted(stream):
    if len(stream.t_local) > 1 and np.any(np.diff(stream.t_local) < 0):
        raise ValueError(f"sensor {stream.sensor_id}: samples are not sorted by t_local")


def resample_stream(stream, clock_map, grid):
    """Resample one sensor onto ``grid``; returns (quat, gyro, valid)."""
    _check_sorted(stream)
    N = grid.count
    quat = np.full((N, 4), np.nan)
    gyro = np.full((N, 3), np.nan)
    valid = np.zeros(N, dtype=bool)
    n = len(stream.t_local)
    if n == 0 or N == 0:
        return quat, gyro, valid
    m = local_to_master(clock_map, stream.t_local)
    ticks = grid.times_us
    inside = (ticks >= m[0]) & (ticks <= m[-1])
    if n == 1:
        hit = inside  # single sample: only an exact tick coincides
        quat[hit] = stream.quat[0]
        gyro[hit] = stream.gyro[0]
        valid[hit] = True
        return quat, gyro, valid
    t = ticks[inside]
    j = np.clip(np.searchsorted(m, t, side="right") - 1, 0, n - 2)
    span = m[j + 1] - m[j]
    u = np.where(span > 0, (t - m[j]) / np.where(span > 0, span, 1.0), 0.0)
    u = np.clip(u, 0.0, 1.0)
    quat[inside] = slerp(stream.quat[j], stream.quat[j + 1], u)
    gyro[inside] = (1.0 - u)[:, None] * stream.gyro[j] + u[:, None] * stream.gyro[j + 1]
    valid[inside] = True
    return quat, gyro, valid


def resample(samples, maps, grid):
    """Align every sensor stream onto ``grid``.

    ``samples`` and ``maps`` are mappings keyed by sensor id; sensors are
    emitted in ascending id order.
    """
    ids = sorted(samples)
    missing = [sid for sid in ids if sid not in maps]
    if missing:
        raise ValueError(f"no clock map for sensors {missing}")
    parts = [resample_stream(samples[sid], maps[sid], grid) for sid in ids]
    if not parts:
        raise ValueError("no sample streams to resample")
    quat, gyro, valid = (np.stack(x) for x in zip(*parts))
    return AlignedSeries(grid, ids, quat, gyro, valid)


# ---------------------------------------------------------------- drift report


@dataclass(eq=False)
class DriftReport:
    """Sampled ``t_local - t_master`` per sensor plus summary statistics.

    ``offsets`` rows are ``(sensor_id, t_master_s, offset_s)``. When the
    simulator's true clocks were supplied, ``mapping_error`` holds per-sensor
    statistics of ``mapped master - true master`` (seconds).
    """

    offsets: np.ndarray
    summary: dict
    mapping_error: dict = field(default_factory=dict)

    def max_mapping_error(self):
        if not self.mapping_error:
            raise ValueError("report has no ground-truth mapping errors")
        return max(v["max_abs"] for v in self.mapping_error.values())


def drift_report(maps, anchors=None, truth=None, cadence=1.0, t_end=None, error_step=0.001):
    """Offset trajectories and statistics for a set of clock maps.

    ``truth`` is an optional mapping ``sensor_id -> clock`` exposing
    ``local(t_master_s)``; ``anchors`` adds residual-at-anchor statistics.
    """
    if not maps:
        raise ValueError("drift report needs at least one clock map")
    rows, summary, errors = [], {}, {}
    anchors = _sorted_anchors(anchors) if anchors else None
    for sid in sorted(maps):
        cmap = maps[sid]
        end = t_end if t_end is not None else cmap.t_master[-1] * 1e-6
        t = np.arange(0.0, end + 1e-9, cadence) if cadence > 0 else np.array([0.0])
        offs = master_to_local(cmap, t * 1e6) * 1e-6 - t
        rows.append(np.column_stack([np.full(len(t), sid), t, offs]))
        entry = {"max_abs_offset": float(np.max(np.abs(offs))), "final_offset": float(offs[-1])}
        if anchors is not None:
            pairs = np.array([(a.latched[sid], a.t_master) for a in anchors if sid in a.latched], dtype=float)
            res = local_to_master(cmap, pairs[:, 0]) - pairs[:, 1]
            entry["anchor_residual_max_us"] = float(np.max(np.abs(res)))
            entry["anchor_residual_rms_us"] = float(np.sqrt(np.mean(res**2)))
        summary[sid] = entry
        if truth is not None and sid in truth:
            tt = np.arange(0.0, end + 1e-12, error_step)
            err = local_to_master(cmap, truth[sid].local(tt) * 1e6) * 1e-6 - tt
            errors[sid] = {
                "max_abs": float(np.max(np.abs(err))),
                "rms": float(np.sqrt(np.mean(err**2))),
                "final": float(err[-1]),
            }
    return DriftReport(np.vstack(rows), summary, errors)


# ------------------------------------------------------------------- estimator


class ClockSynchronizer(TransformerMixin, BaseEstimator):
    """Fit per-sensor clock maps from anchors, then resample sample streams.

    Parameters
    ----------
    rate : float
        Output grid rate in Hz.
    baseline : bool
        Use only the first anchor ("one-time calibration") instead of the
        full piecewise-linear map.
    t_start : int
        First grid tick, master microseconds.
    duration : float or None
        Grid span in seconds; defaults to the last anchor's master time.
    """

    def __init__(self, rate=800.0, baseline=False, t_start=0, duration=None):
        self.rate = rate
        self.baseline = baseline
        self.t_start = t_start
        self.duration = duration

    def fit(self, anchors, y=None):
        anchors = list(anchors)
        if not anchors:
            raise ValueError("at least one anchor record is required")
        fit = one_time_baseline if self.baseline else fit_clock_map
        ids = sorted(set().union(*(a.latched for a in anchors)))
        self.clock_maps_ = {sid: fit(anchors, sid) for sid in ids}
        last = max(a.t_master for a in anchors)
        span = self.duration if self.duration is not None else (last - self.t_start) * 1e-6
        self.grid_ = UniformGrid.covering(span, self.rate, self.t_start)
        self.anchors_ = _sorted_anchors(anchors)
        return self

    def transform(self, samples):
        check_is_fitted(self, "clock_maps_")
        return resample(samples, self.clock_maps_, self.grid_)

    def fit_transform(self, anchors, samples=None, **fit_params):
        if samples is None:
            raise TypeError("fit_transform needs both anchors and sample streams")
        return self.fit(anchors).transform(samples)

    def drift_report(self, truth=None, cadence=1.0):
        check_is_fitted(self, "clock_maps_")
        end = (self.grid_.count - 1) / self.rate + self.t_start * 1e-6
        return drift_report(self.clock_maps_, self.anchors_, truth, cadence, t_end=end)
