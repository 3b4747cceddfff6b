"""Angular-speed spectrograms and high-band energy landscapes.

Power convention: for a Hann-windowed frame ``x_w`` of length ``N`` with DFT
``X``, the one-sided power is ``|X_k|^2 / N`` at DC and Nyquist and
``2 |X_k|^2 / N`` elsewhere, so each frame's powers sum to ``sum(x_w**2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal.windows import hann
from sklearn.base import BaseEstimator, TransformerMixin

from .geom import quat_distance
from .timesync import AlignedSeries, UniformGrid

WINDOW_LENGTH = 256
HOP = 16
F_MIN = 100.0


@dataclass(eq=False)
class AngularSpeedSeries:
    grid: UniformGrid
    labels: list
    speed: np.ndarray  # (S, N) rad/s
    valid: np.ndarray  # (S, N)


@dataclass(eq=False)
class Spectrogram:
    times: np.ndarray  # (T,) frame centres, seconds
    freqs: np.ndarray  # (F,) Hz
    power: np.ndarray  # (T, F)
    window_length: int
    hop: int
    rate: float


@dataclass(eq=False)
class BandEnergyProfile:
    """Per-segment band energy; NaN where a frame overlaps invalid ticks."""

    times: np.ndarray
    labels: list
    energy: np.ndarray  # (S, T)
    f_min: float

    def row(self, label):
        return self.energy[self.labels.index(label)]


def angular_speed(series, mode="auto", labels=None):
    """Magnitude of angular velocity per segment.

    ``mode="gyro"`` takes ``|gyro|`` from an :class:`AlignedSeries`;
    ``mode="orientation"`` differentiates orientations,
    ``|log(R_k^T R_{k+1})| * rate``, stored at tick ``k`` (the last tick is
    invalid). ``"auto"`` prefers the gyro when the series carries one.
    """
    has_gyro = isinstance(series, AlignedSeries)
    if mode == "auto":
        mode = "gyro" if has_gyro else "orientation"
    if mode not in ("gyro", "orientation"):
        raise ValueError(f"unknown angular speed mode {mode!r}")
    if labels is None:
        labels = list(getattr(series, "labels", None) or series.sensor_ids)
    valid = series.valid
    if mode == "gyro":
        if not has_gyro:
            raise ValueError("gyro mode needs an aligned series with gyro channels")
        speed = np.linalg.norm(series.gyro, axis=-1)
        ok = valid.copy()
    else:
        q = series.quat
        speed = np.full(valid.shape, np.nan)
        speed[:, :-1] = quat_distance(q[:, :-1], q[:, 1:]) * series.grid.rate
        ok = np.zeros_like(valid)
        ok[:, :-1] = valid[:, :-1] & valid[:, 1:]
    speed = np.where(ok, speed, np.nan)
    return AngularSpeedSeries(series.grid, list(labels), speed, ok)


def stft(signal, rate, window_length=WINDOW_LENGTH, hop=HOP, t0=0.0):
    """Hann-windowed one-sided power spectrogram, full frames only.

    Frames start at ``0, hop, 2*hop, ...``; frame times are window centres,
    ``t0 + (start + window_length / 2) / rate``.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    if window_length < 2 or hop < 1:
        raise ValueError("window_length must be >= 2 and hop >= 1")
    if len(x) < window_length:
        raise ValueError(f"signal of length {len(x)} is shorter than one window ({window_length})")
    w = hann(window_length, sym=False)
    frames = sliding_window_view(x, window_length)[::hop]
    X = np.fft.rfft(frames * w, axis=-1)
    power = np.abs(X) ** 2 / window_length
    power[:, 1:] *= 2.0
    if window_length % 2 == 0:
        power[:, -1] /= 2.0
    starts = np.arange(len(frames)) * hop
    times = t0 + (starts + window_length / 2) / rate
    freqs = np.fft.rfftfreq(window_length, d=1.0 / rate)
    return Spectrogram(times, freqs, power, window_length, hop, float(rate))


def band_energy(spec, f_min=F_MIN):
    """Linear sum of power over bins with centre frequency strictly above ``f_min``.

    A threshold at or above Nyquist selects no bins and yields zeros.
    """
    return spec.power[:, spec.freqs > f_min].sum(axis=1)


def total_energy(spec):
    return spec.power.sum(axis=1)


def energy_landscape(series, f_min=F_MIN, window_length=WINDOW_LENGTH, hop=HOP, mode="auto", labels=None):
    """Angular speed -> STFT -> band energy for every segment."""
    speed = series if isinstance(series, AngularSpeedSeries) else angular_speed(series, mode, labels)
    rate = speed.grid.rate
    t0 = speed.grid.t_start * 1e-6
    S, N = speed.speed.shape
    n_frames = max((N - window_length) // hop + 1, 0) if N >= window_length else 0
    times = t0 + (np.arange(n_frames) * hop + window_length / 2) / rate
    energy = np.full((S, n_frames), np.nan)
    if n_frames == 0:
        return BandEnergyProfile(times, list(speed.labels), energy, f_min)
    for i in range(S):
        ok = speed.valid[i]
        if not ok.any():
            continue
        x = np.where(ok, speed.speed[i], 0.0)
        spec = stft(x, rate, window_length, hop, t0)
        full = sliding_window_view(ok, window_length)[::hop].all(axis=1)
        energy[i] = np.where(full, band_energy(spec, f_min), np.nan)
    return BandEnergyProfile(times, list(speed.labels), energy, f_min)


class BandEnergyLandscape(TransformerMixin, BaseEstimator):
    """Stateless transformer: aligned or hand-frame series -> band energy profile."""

    def __init__(self, f_min=F_MIN, window_length=WINDOW_LENGTH, hop=HOP, mode="auto", labels=None):
        self.f_min = f_min
        self.window_length = window_length
        self.hop = hop
        self.mode = mode
        self.labels = labels

    def fit(self, X=None, y=None):
        if self.window_length < 2 or self.hop < 1:
            raise ValueError("window_length must be >= 2 and hop >= 1")
        if self.mode not in ("auto", "gyro", "orientation"):
            raise ValueError(f"unknown mode {self.mode!r}")
        return self

    def transform(self, X):
        return energy_landscape(X, self.f_min, self.window_length, self.hop, self.mode, self.labels)

    def __sklearn_is_fitted__(self):
        return True
