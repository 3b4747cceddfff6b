"""Two-step closed-form spatial calibration.

Frames: ``{W}`` world, ``{IW}`` a sensor's private world (z against
gravity, heading offset ``theta`` from ``{W}``), ``{I}`` the sensor body,
``{H}`` the anatomical segment. A sensor reading ``R^{IW}_I`` maps to the
segment orientation through

    R^W_H = rot_z(theta) @ R^{IW}_I @ R^I_H

Step 1 (zero pose, ``R^W_H = I``) fixes ``R^I_H`` up to ``theta``; step 2
(a rotation by ``alpha`` about world x) fixes ``theta`` in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geom import chordal_mean, check_rotation, matrix_to_quat, quat_to_matrix, rot_z
from .timesync import UniformGrid

DEGENERATE_SIN_ALPHA = 0.05


class DegenerateCapture(ValueError):
    """The calibration rotation was too close to 0 or pi; recapture required."""

    def __init__(self, message, sensor_ids=()):
        super().__init__(message)
        self.sensor_ids = list(sensor_ids)


def _T(R):
    return np.swapaxes(R, -1, -2)


def capture_rotation(R0, Rs, Re):
    """Known side of the calibration identity: ``R0 Rs^T Re R0^T``."""
    return R0 @ _T(Rs) @ Re @ _T(R0)


def solve_theta(R0, Rs, Re, threshold=DEGENERATE_SIN_ALPHA):
    """Heading offset ``theta`` from the zero, start and end captures.

    Returns ``(theta, sin_alpha)``. The third column of the capture rotation
    is ``(-sin(theta) sin(alpha), -cos(theta) sin(alpha), cos(alpha))``, so
    ``theta = atan2(-R13, -R23)`` and its norm in the xy-plane is
    ``sin(alpha)``. Broadcasts over leading axes.

    Raises
    ------
    DegenerateCapture
        If ``sin_alpha < threshold`` for any input.
    """
    R = capture_rotation(R0, Rs, Re)
    r13, r23 = R[..., 0, 2], R[..., 1, 2]
    theta = np.arctan2(-r13, -r23)
    sin_alpha = np.hypot(r13, r23)
    if np.any(sin_alpha < threshold):
        raise DegenerateCapture(
            f"calibration rotation too close to 0 or pi (sin(alpha) = {np.min(sin_alpha):.3g} < {threshold})"
        )
    return theta, sin_alpha


def compute_mount(R0, theta):
    """``R^I_H = R0^T rot_z(theta)^T`` from the zero-pose reading."""
    return _T(R0) @ _T(rot_z(theta))


@dataclass(frozen=True, eq=False)
class CalibrationEntry:
    sensor_id: int
    theta: float
    R_I_H: np.ndarray

    @property
    def R_W_IW(self):
        return rot_z(self.theta)


def apply_calibration(R_IW_I, entry):
    """Segment orientation ``R^W_H`` for sensor reading(s) ``R^{IW}_I``."""
    return entry.R_W_IW @ np.asarray(R_IW_I, dtype=float) @ entry.R_I_H


@dataclass(eq=False)
class SpatialCalibration:
    entries: dict  # sensor_id -> CalibrationEntry

    def __getitem__(self, sensor_id):
        return self.entries[sensor_id]

    def __contains__(self, sensor_id):
        return sensor_id in self.entries

    @property
    def sensor_ids(self):
        return sorted(self.entries)

    def to_dict(self):
        return {
            "sensors": [
                {"sensor_id": int(e.sensor_id), "theta_rad": float(e.theta), "R_I_H": [float(v) for v in e.R_I_H.reshape(-1)]}
                for e in (self.entries[s] for s in self.sensor_ids)
            ]
        }

    @classmethod
    def from_dict(cls, doc):
        entries = {}
        for row in doc["sensors"]:
            M = check_rotation(np.asarray(row["R_I_H"], dtype=float).reshape(3, 3), f"R_I_H[{row['sensor_id']}]")
            entries[int(row["sensor_id"])] = CalibrationEntry(int(row["sensor_id"]), float(row["theta_rad"]), M)
        return cls(entries)


@dataclass(frozen=True, eq=False)
class CalibrationCaptures:
    """Per-sensor ``(R0, Rs, Re)`` capture matrices."""

    R0: dict
    Rs: dict
    Re: dict

    @classmethod
    def from_windows(cls, windows):
        """Average capture sample windows (``{pose: {sid: SampleStream}}``).

        Each window is reduced by chordal mean plus re-orthonormalization.
        """

        def reduce(pose):
            return {sid: chordal_mean(quat_to_matrix(s.quat)) for sid, s in windows[pose].items()}

        return cls(reduce("zero"), reduce("start"), reduce("end"))

    @property
    def sensor_ids(self):
        return sorted(self.R0)


def calibrate_hand(captures, sensor_ids=None, threshold=DEGENERATE_SIN_ALPHA):
    """Solve every sensor in one pass; fails atomically on any degenerate one."""
    ids = sorted(sensor_ids) if sensor_ids is not None else captures.sensor_ids
    missing = [s for s in ids if s not in captures.R0 or s not in captures.Rs or s not in captures.Re]
    if missing:
        raise ValueError(f"captures missing for sensors {missing}")
    R0 = np.stack([check_rotation(captures.R0[s], f"R0[{s}]") for s in ids])
    Rs = np.stack([check_rotation(captures.Rs[s], f"Rs[{s}]") for s in ids])
    Re = np.stack([check_rotation(captures.Re[s], f"Re[{s}]") for s in ids])
    theta, sin_alpha = solve_theta(R0, Rs, Re, threshold=0.0)
    bad = [s for s, sa in zip(ids, sin_alpha) if sa < threshold]
    if bad:
        raise DegenerateCapture(f"degenerate calibration capture for sensors {bad}; recapture required", bad)
    mounts = compute_mount(R0, theta)
    return SpatialCalibration({s: CalibrationEntry(s, float(t), M) for s, t, M in zip(ids, theta, mounts)})


@dataclass(eq=False)
class HandFrameSeries:
    grid: UniformGrid
    labels: list
    quat: np.ndarray  # (S, N, 4) R^W_H
    valid: np.ndarray  # (S, N)

    def rotations(self, label):
        return quat_to_matrix(self.quat[self.labels.index(label)])


def reconstruct(aligned, calibration, topology):
    """Apply the calibration tick by tick; validity is carried over."""
    ids = list(aligned.sensor_ids)
    if set(ids) != set(topology.ids):
        raise ValueError("aligned series and topology cover different sensors")
    missing = [s for s in ids if s not in calibration]
    if missing:
        raise ValueError(f"calibration missing for sensors {missing}")
    out = np.full(aligned.quat.shape, np.nan)
    for i, sid in enumerate(ids):
        ok = aligned.valid[i]
        R = quat_to_matrix(aligned.quat[i, ok])
        out[i, ok] = matrix_to_quat(apply_calibration(R, calibration[sid]), check=False)
    labels = [topology.label_of(s) for s in ids]
    return HandFrameSeries(aligned.grid, labels, out, aligned.valid.copy())


class SpatialCalibrator(TransformerMixin, BaseEstimator):
    """Fit heading/mount per sensor from captures; transform aligned series.

    Parameters
    ----------
    topology : SensorTopology
        Maps sensor ids to segment labels; all of its sensors must be captured.
    threshold : float
        Minimum ``sin(alpha)`` accepted for a capture.
    """

    def __init__(self, topology=None, threshold=DEGENERATE_SIN_ALPHA):
        self.topology = topology
        self.threshold = threshold

    def fit(self, captures, y=None):
        if isinstance(captures, dict):
            captures = CalibrationCaptures.from_windows(captures)
        ids = self.topology.ids if self.topology is not None else None
        self.calibration_ = calibrate_hand(captures, ids, self.threshold)
        return self

    def transform(self, aligned):
        check_is_fitted(self, "calibration_")
        if self.topology is None:
            raise ValueError("SpatialCalibrator.transform needs a topology")
        return reconstruct(aligned, self.calibration_, self.topology)

    def fit_transform(self, captures, aligned=None, **fit_params):
        if aligned is None:
            raise TypeError("fit_transform needs both captures and an aligned series")
        return self.fit(captures).transform(aligned)
