"""Simulated 18-node IMU network.

Each node runs its own drifting oscillator, samples a scripted ground-truth
hand motion whenever its local clock crosses ``k / nominal_rate``, and
latches its local timestamp on every broadcast anchor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .geom import exp_so3, matrix_to_quat, normalize_quat, quat_to_matrix, rot_x, rot_z

FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# noise stream tags for SeedSequence derivation
_CLOCK, _LATCH, _ORIENT, _GYRO, _CAPTURE = 1, 2, 3, 4, 5
_MOUNT, _OSC = 100, 101


def derive_rng(seed, *tags):
    """Independent generator for ``(seed, *tags)``; the only RNG entry point."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


# -------------------------------------------------------------------- topology


@dataclass(frozen=True)
class SensorNode:
    sensor_id: int
    segment_label: str
    parent_id: int | None = None

    @property
    def finger(self):
        head = self.segment_label.split("_")[0]
        return head if head in FINGERS else None


@dataclass(frozen=True)
class SensorTopology:
    sensors: tuple[SensorNode, ...]

    def __post_init__(self):
        sensors = tuple(self.sensors)
        object.__setattr__(self, "sensors", sensors)
        if not sensors:
            raise ValueError("topology must contain at least one sensor")
        ids = [s.sensor_id for s in sensors]
        labels = [s.segment_label for s in sensors]
        if len(set(ids)) != len(ids):
            raise ValueError("sensor ids must be unique")
        if len(set(labels)) != len(labels):
            raise ValueError("segment labels must be unique")
        roots = [s for s in sensors if s.parent_id is None]
        if len(roots) != 1:
            raise ValueError(f"topology needs exactly one root, found {len(roots)}")
        parent = {s.sensor_id: s.parent_id for s in sensors}
        for sid, pid in parent.items():
            if pid is not None and pid not in parent:
                raise ValueError(f"sensor {sid} has unknown parent {pid}")
        for sid in ids:
            seen, cur = set(), sid
            while cur is not None:
                if cur in seen:
                    raise ValueError(f"parent links form a cycle through sensor {sid}")
                seen.add(cur)
                cur = parent[cur]

    @property
    def ids(self):
        return [s.sensor_id for s in self.sensors]

    @property
    def labels(self):
        return [s.segment_label for s in self.sensors]

    @property
    def is_full_hand(self):
        return len(self.sensors) == 18

    def label_of(self, sensor_id):
        for s in self.sensors:
            if s.sensor_id == sensor_id:
                return s.segment_label
        raise KeyError(sensor_id)

    def id_of(self, label):
        for s in self.sensors:
            if s.segment_label == label:
                return s.sensor_id
        raise KeyError(label)

    def subset(self, labels):
        """Single-root sub-topology; parents outside the subset are dropped."""
        keep = [s for s in self.sensors if s.segment_label in set(labels)]
        kept = {s.sensor_id for s in keep}
        nodes = [SensorNode(s.sensor_id, s.segment_label, s.parent_id if s.parent_id in kept else None) for s in keep]
        return SensorTopology(tuple(nodes))


def hand_topology():
    """The 18-sensor glove: hub, forearm, palm and 15 finger segments."""
    nodes = [
        SensorNode(0, "wrist_hub", None),
        SensorNode(1, "forearm", 0),
        SensorNode(2, "palm", 0),
    ]
    bones = {"thumb": ("MC", "PP", "DP")}
    for f in FINGERS[1:]:
        bones[f] = ("PP", "MP", "DP")
    sid = 3
    for f in FINGERS:
        parent = 2
        for b in bones[f]:
            nodes.append(SensorNode(sid, f"{f}_{b}", parent))
            parent = sid
            sid += 1
    return SensorTopology(tuple(nodes))


# ------------------------------------------------------------------- oscillator


@dataclass(frozen=True)
class OscillatorModel:
    """Per-node clock: rates in Hz, offsets in ppm, times in seconds.

    ``random_walk`` is the std of the accumulated phase error after one
    second, in ppm-seconds (so ``1e-6 * random_walk * sqrt(t)`` seconds at
    time ``t``).
    """

    nominal_rate: float = 800.0
    freq_offset: float = 0.0
    random_walk: float = 0.0
    latch_jitter: float = 0.0
    initial_offset: float = 0.0

    def __post_init__(self):
        if not self.nominal_rate > 0:
            raise ValueError("nominal_rate must be positive")
        if self.random_walk < 0:
            raise ValueError("random_walk must be non-negative")
        if self.latch_jitter < 0:
            raise ValueError("latch_jitter must be non-negative")
        for name in ("nominal_rate", "freq_offset", "random_walk", "latch_jitter", "initial_offset"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def is_ideal(self):
        return self.freq_offset == 0 and self.random_walk == 0 and self.latch_jitter == 0 and self.initial_offset == 0


def default_oscillators(
    topology,
    seed,
    offset_range=100.0,
    random_walk=5.0,
    latch_jitter=5e-6,
    initial_offset_range=0.0,
    nominal_rate=800.0,
):
    """Draw per-sensor oscillators: offset ~ U(-range, range) ppm."""
    rng = derive_rng(seed, _OSC)
    out = {}
    for sid in topology.ids:
        ppm = rng.uniform(-offset_range, offset_range)
        init = rng.uniform(0.0, initial_offset_range)
        out[sid] = OscillatorModel(nominal_rate, ppm, random_walk, latch_jitter, init)
    return out


@dataclass(frozen=True, eq=False)
class PhaseWalk:
    """Gaussian random walk of clock phase, linear between grid nodes."""

    step: float
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        grid = np.arange(len(self.values)) * self.step
        return np.interp(t, grid, self.values)


def sample_phase_walk(osc, horizon, rng, step=0.01):
    n = int(math.ceil(horizon / step)) + 2
    sigma = osc.random_walk * 1e-6 * math.sqrt(step)
    incr = rng.normal(0.0, sigma, n - 1) if sigma > 0 else np.zeros(n - 1)
    return PhaseWalk(step, np.concatenate([[0.0], np.cumsum(incr)]))


def local_clock(osc, t_master, walk=None):
    """Local clock reading (s) at master time ``t_master`` (s)."""
    t = np.asarray(t_master, dtype=float)
    out = t * (1.0 + osc.freq_offset * 1e-6) + osc.initial_offset
    if walk is not None:
        out = out + walk(t)
    return out


class DriftingClock:
    """One node's oscillator realization: local time, inverse, and latching."""

    def __init__(self, osc, horizon, walk_rng=None, latch_rng=None, step=0.01):
        self.osc = osc
        self.horizon = float(horizon)
        self._slope = 1.0 + osc.freq_offset * 1e-6
        self.walk = None
        if osc.random_walk > 0:
            self.walk = sample_phase_walk(osc, horizon, walk_rng, step)
            self._grid = np.arange(len(self.walk.values)) * step
            self._local_grid = local_clock(osc, self._grid, self.walk)
        self._latch_rng = latch_rng

    def local(self, t_master):
        t = np.asarray(t_master, dtype=float)
        if self.walk is None:
            return t * self._slope + self.osc.initial_offset
        out = np.interp(t, self._grid, self._local_grid)
        hi = t > self._grid[-1]
        if np.any(hi):
            out = np.where(hi, self._local_grid[-1] + (t - self._grid[-1]) * self._slope, out)
        lo = t < 0
        if np.any(lo):
            out = np.where(lo, self._local_grid[0] + t * self._slope, out)
        return out

    def master(self, t_local):
        tl = np.asarray(t_local, dtype=float)
        if self.walk is None:
            return (tl - self.osc.initial_offset) / self._slope
        out = np.interp(tl, self._local_grid, self._grid)
        hi = tl > self._local_grid[-1]
        if np.any(hi):
            out = np.where(hi, self._grid[-1] + (tl - self._local_grid[-1]) / self._slope, out)
        lo = tl < self._local_grid[0]
        if np.any(lo):
            out = np.where(lo, (tl - self._local_grid[0]) / self._slope, out)
        return out

    def latch(self, t_master):
        """Latched local timestamp in integer microseconds."""
        value = float(self.local(t_master))
        if self.osc.latch_jitter > 0:
            value += self._latch_rng.normal(0.0, self.osc.latch_jitter)
        return int(round(value * 1e6))


# ---------------------------------------------------------------------- records


@dataclass(frozen=True)
class AnchorRecord:
    anchor_id: int
    t_master: int  # microseconds
    latched: Mapping[int, int]  # sensor_id -> local microseconds


def broadcast_latch(t_master_us, clocks, anchor_id=0):
    """Latch every node's local clock at the same master instant."""
    t = t_master_us * 1e-6
    return AnchorRecord(int(anchor_id), int(t_master_us), {sid: c.latch(t) for sid, c in clocks.items()})


@dataclass(eq=False)
class SampleStream:
    """Columnar per-sensor samples; one row per ``SensorSample``."""

    sensor_id: int
    seq: np.ndarray
    t_local: np.ndarray  # int64 microseconds
    quat: np.ndarray  # (n, 4) orientation of {I} in {IW}
    gyro: np.ndarray  # (n, 3) rad/s, body frame

    def __len__(self):
        return len(self.seq)

    def validate(self):
        if len(self.seq) > 1:
            if np.any(np.diff(self.seq) <= 0):
                raise ValueError(f"sensor {self.sensor_id}: seq must be strictly increasing")
            if np.any(np.diff(self.t_local) < 0):
                raise ValueError(f"sensor {self.sensor_id}: t_local must be non-decreasing")
        return self


@dataclass(frozen=True, eq=False)
class SensorMount:
    """Ground-truth static frames: heading ``theta`` and ``R^I_H``."""

    theta: float
    R_I_H: np.ndarray


@dataclass(eq=False)
class GroundTruthLog:
    t_master: np.ndarray  # int64 microseconds
    labels: list[str]
    quat: np.ndarray  # (S, N, 4) R^W_H per segment
    omega: np.ndarray  # (S, N, 3) body-frame angular velocity

    def rotations(self, label):
        return quat_to_matrix(self.quat[self.labels.index(label)])


# ---------------------------------------------------------------------- motion

Driver = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def _static_driver(t):
    n = np.shape(t)
    return np.broadcast_to(np.eye(3), n + (3, 3)).copy(), np.zeros(n + (3,))


def _axis_driver(axis, angle, rate):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)

    def drive(t):
        psi = angle(t)
        return exp_so3(psi[..., None] * axis), rate(t)[..., None] * axis

    return drive


class MotionScript:
    """Analytic per-segment orientation ``R^W_H(t)`` and body rate ``omega(t)``.

    Segments without a driver stay at the identity (zero pose).
    """

    def __init__(self, duration, kind, drivers, params=None, omega_bound=0.0):
        if not duration > 0:
            raise ValueError("duration must be positive")
        self.duration = float(duration)
        self.kind = kind
        self.params = dict(params or {})
        self.omega_bound = float(omega_bound)
        self._drivers = drivers

    def _driver(self, segment):
        return self._drivers(segment) or _static_driver

    def ground_truth(self, t, segment):
        t = np.asarray(t, dtype=float)
        return self._driver(segment)(t)

    def orientation(self, t, segment):
        return self.ground_truth(t, segment)[0]

    def angular_velocity(self, t, segment):
        return self.ground_truth(t, segment)[1]

    def is_active(self, segment):
        return self._drivers(segment) is not None


class _Selector:
    def __init__(self, include=None, exclude=()):
        self.include = None if include in (None, "all") else set(include)
        self.exclude = set(exclude or ())

    @staticmethod
    def _keys(label):
        return {label, label.split("_")[0]}

    def __call__(self, label):
        keys = self._keys(label)
        if keys & self.exclude:
            return False
        return self.include is None or bool(keys & self.include)


_MOTION_PARAMS = {
    "static": {},
    "flip": {"frequency": 1.0, "amplitude": 1.2, "phase": 0.0, "segments": None, "exclude": ()},
    "chirp": {
        "f0": 20.0,
        "f1": 200.0,
        "amplitude": 2.0,
        "bias": 0.0,
        "axis": (1.0, 0.0, 0.0),
        "segments": ("index_MP",),
        "exclude": (),
    },
    "burst": {
        "centers": None,
        "width": 0.05,
        "frequency": 150.0,
        "amplitude": 5.0,
        "axis": (1.0, 0.0, 0.0),
        "segments": None,
        "exclude": (),
    },
}

MOTION_KINDS = tuple(_MOTION_PARAMS)


def gen_motion(kind, duration=10.0, **params):
    """Build an analytic motion script.

    kinds
        ``static``: every segment holds the zero pose.
        ``flip``: pitch ``amplitude * sin(2 pi f t + phase)`` about x on the
        selected segments.
        ``chirp``: angular rate ``bias + amplitude * (f(t)/f_mean) cos(phase(t))``
        about ``axis``, ``f(t)`` sweeping linearly from ``f0`` to ``f1``.
        ``burst``: Gaussian-windowed ``frequency`` Hz oscillations centred on
        ``centers`` (seconds), other segments quiescent.

    ``segments`` and ``exclude`` take segment labels or finger names.
    """
    if kind not in _MOTION_PARAMS:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {MOTION_KINDS}")
    unknown = set(params) - set(_MOTION_PARAMS[kind])
    if unknown:
        raise ValueError(f"unknown parameter(s) for {kind!r} motion: {sorted(unknown)}")
    p = {**_MOTION_PARAMS[kind], **params}
    T = float(duration)

    if kind == "static":
        return MotionScript(T, kind, lambda seg: None, p)

    select = _Selector(p["segments"], p["exclude"])

    if kind == "flip":
        A, f, ph = float(p["amplitude"]), float(p["frequency"]), float(p["phase"])
        w = 2 * np.pi * f

        def flip(t):
            pitch = A * np.sin(w * t + ph)
            rate = A * w * np.cos(w * t + ph)
            omega = np.zeros(np.shape(t) + (3,))
            omega[..., 0] = rate
            return rot_x(pitch), omega

        return MotionScript(T, kind, lambda seg: flip if select(seg) else None, p, abs(A * w))

    if kind == "chirp":
        f0, f1 = float(p["f0"]), float(p["f1"])
        A, b = float(p["amplitude"]), float(p["bias"])
        fm = 0.5 * (f0 + f1)
        k = (f1 - f0) / T
        if fm <= 0 and A != 0:
            raise ValueError("chirp with nonzero amplitude needs f0 + f1 > 0")
        amp = A / (2 * np.pi * fm) if A != 0 else 0.0

        def phase(t):
            return 2 * np.pi * (f0 * t + 0.5 * k * t * t)

        def angle(t):
            return b * t + amp * np.sin(phase(t))

        def rate(t):
            return b + amp * 2 * np.pi * (f0 + k * t) * np.cos(phase(t))

        drive = _axis_driver(p["axis"], angle, rate)
        bound = abs(b) + (abs(A) * max(f0, f1) / fm if A != 0 else 0.0)
        return MotionScript(T, kind, lambda seg: drive if select(seg) else None, p, bound)

    # burst
    centers = p["centers"]
    centers = np.asarray([T / 2] if centers is None else centers, dtype=float)
    sig, f, A = float(p["width"]), float(p["frequency"]), float(p["amplitude"])
    w = 2 * np.pi * f
    B = A / w

    def angle(t):
        d = t[..., None] - centers
        g = np.exp(-0.5 * (d / sig) ** 2)
        return B * np.sum(g * np.sin(w * d), axis=-1)

    def rate(t):
        d = t[..., None] - centers
        g = np.exp(-0.5 * (d / sig) ** 2)
        return B * np.sum(g * (w * np.cos(w * d) - d / sig**2 * np.sin(w * d)), axis=-1)

    drive = _axis_driver(p["axis"], angle, rate)
    bound = len(centers) * (A + B / sig)
    return MotionScript(T, kind, lambda seg: drive if select(seg) else None, {**p, "centers": centers.tolist()}, bound)


# ------------------------------------------------------------------- sessions


def random_mounting(topology, seed):
    """Uniform heading and uniform SO(3) mount per sensor."""
    rng = derive_rng(seed, _MOUNT)
    out = {}
    for sid in topology.ids:
        theta = rng.uniform(-np.pi, np.pi)
        q = normalize_quat(rng.normal(size=4))
        out[sid] = SensorMount(float(theta), quat_to_matrix(q))
    return out


def sensor_reading(R_W_H, mount):
    """``R^{IW}_I`` seen by a sensor with ``mount`` on a segment at ``R^W_H``."""
    return rot_z(mount.theta).T @ R_W_H @ mount.R_I_H.T


def _perturb(R, sigma, rng):
    if sigma <= 0:
        return R
    return R @ exp_so3(rng.normal(0.0, sigma, R.shape[:-2] + (3,)))


@dataclass(eq=False)
class SimulatedSession:
    topology: SensorTopology
    oscillators: dict
    mounting: dict
    samples: dict  # sensor_id -> SampleStream
    anchors: list
    truth: GroundTruthLog
    clocks: dict
    duration: float
    extra: dict = field(default_factory=dict)


def session_clocks(oscillators, duration, seed=0, walk_step=0.01):
    """The per-node clock realizations a session with ``seed`` uses."""
    horizon = duration + 1.0
    return {
        sid: DriftingClock(osc, horizon, derive_rng(seed, _CLOCK, sid), derive_rng(seed, _LATCH, sid), walk_step)
        for sid, osc in sorted(oscillators.items())
    }


def simulate_session(
    topology,
    oscillators,
    motion,
    anchor_period=1.0,
    seed=0,
    mounting=None,
    orientation_noise=0.0,
    gyro_noise=0.0,
    truth_rate=800.0,
    walk_step=0.01,
):
    """Generate asynchronous samples, broadcast anchors and ground truth.

    ``oscillators`` is a single model shared by all nodes or a mapping
    ``sensor_id -> OscillatorModel``. Noise levels are per-axis standard
    deviations: radians for orientation, rad/s for the gyro.
    """
    if topology is None or not topology.sensors:
        raise ValueError("topology must contain at least one sensor")
    duration = motion.duration
    if not duration > 0:
        raise ValueError("duration must be positive")
    if not anchor_period > 0:
        raise ValueError("anchor_period must be positive")
    if isinstance(oscillators, OscillatorModel) or oscillators is None:
        oscillators = {sid: oscillators or OscillatorModel() for sid in topology.ids}
    missing = set(topology.ids) - set(oscillators)
    if missing:
        raise ValueError(f"no oscillator model for sensors {sorted(missing)}")
    if mounting is None:
        mounting = random_mounting(topology, seed)

    clocks = session_clocks({sid: oscillators[sid] for sid in topology.ids}, duration, seed, walk_step)

    n_anchor = int(math.floor(duration / anchor_period + 1e-9)) + 1
    anchors = [broadcast_latch(int(round(k * anchor_period * 1e6)), clocks, k) for k in range(n_anchor)]

    samples = {}
    for node in topology.sensors:
        sid = node.sensor_id
        osc, clock, mount = oscillators[sid], clocks[sid], mounting[sid]
        rate = osc.nominal_rate
        lo = float(clock.local(0.0)) * rate
        hi = float(clock.local(duration)) * rate
        k = np.arange(math.ceil(lo - 1e-9), math.floor(hi + 1e-9) + 1, dtype=np.int64)
        t_local_true = k / rate
        t_master = np.clip(clock.master(t_local_true), 0.0, duration)
        R_WH, omega_H = motion.ground_truth(t_master, node.segment_label)
        R = sensor_reading(R_WH, mount)
        R = _perturb(R, orientation_noise, derive_rng(seed, _ORIENT, sid))
        gyro = omega_H @ mount.R_I_H.T
        if gyro_noise > 0:
            gyro = gyro + derive_rng(seed, _GYRO, sid).normal(0.0, gyro_noise, gyro.shape)
        samples[sid] = SampleStream(
            sid,
            np.arange(len(k), dtype=np.int64),
            np.rint(k * (1e6 / rate)).astype(np.int64),
            matrix_to_quat(R, check=False),
            gyro,
        )

    n_truth = int(math.floor(duration * truth_rate + 1e-9)) + 1
    t_truth = np.arange(n_truth) / truth_rate
    tq, tw = [], []
    for label in topology.labels:
        R_WH, omega_H = motion.ground_truth(t_truth, label)
        tq.append(matrix_to_quat(R_WH, check=False))
        tw.append(omega_H)
    truth = GroundTruthLog(
        np.rint(t_truth * 1e6).astype(np.int64), list(topology.labels), np.stack(tq), np.stack(tw)
    )
    return SimulatedSession(topology, dict(oscillators), mounting, samples, anchors, truth, clocks, duration)


CAPTURE_POSES = ("zero", "start", "end")


def simulate_captures(
    topology, mounting, alpha=np.pi / 2, window=0.25, rate=800.0, noise=0.0, seed=0, start_pitch=0.0
):
    """Static capture windows for the two-step spatial calibration.

    ``zero``: hand flat in the zero pose. ``start``/``end``: before and after a
    rotation by ``alpha`` about the world x-axis starting at pitch
    ``start_pitch``. Returns ``{pose: {sensor_id: SampleStream}}``.
    """
    n = max(int(round(window * rate)), 1)
    poses = {"zero": np.eye(3), "start": rot_x(start_pitch), "end": rot_x(start_pitch + alpha)}
    out = {}
    for i, (name, R_WH) in enumerate(poses.items()):
        streams = {}
        t0 = int(round(i * 2.0 * 1e6))
        for sid in topology.ids:
            R = np.broadcast_to(sensor_reading(R_WH, mounting[sid]), (n, 3, 3))
            R = _perturb(R, noise, derive_rng(seed, _CAPTURE, sid, i))
            streams[sid] = SampleStream(
                sid,
                np.arange(n, dtype=np.int64),
                t0 + np.rint(np.arange(n) * (1e6 / rate)).astype(np.int64),
                matrix_to_quat(R, check=False),
                np.zeros((n, 3)),
            )
        out[name] = streams
    return out
