"""Simulated IMU network: clocks, latching, sampling and scripted motion."""
import math

import numpy as np
import pytest

from handsync.geom import exp_so3, geodesic_distance, log_so3, quat_distance, quat_to_matrix, rot_x, rot_z
from handsync.simnet import (
    AnchorRecord,
    DriftingClock,
    OscillatorModel,
    SensorNode,
    SensorTopology,
    broadcast_latch,
    default_oscillators,
    derive_rng,
    gen_motion,
    hand_topology,
    local_clock,
    random_mounting,
    sample_phase_walk,
    sensor_reading,
    simulate_captures,
    simulate_session,
)

IDEAL = OscillatorModel()


def _single(label="palm"):
    return SensorTopology((SensorNode(0, label, None),))


# -------------------------------------------------------------------- topology


def test_hand_topology_shape():
    topo = hand_topology()
    assert len(topo.sensors) == 18
    assert len(set(topo.labels)) == 18
    assert topo.is_full_hand
    root = [s for s in topo.sensors if s.parent_id is None]
    assert [s.segment_label for s in root] == ["wrist_hub"]
    by_id = {s.sensor_id: s for s in topo.sensors}
    for s in topo.sensors:
        hops, node = 0, s
        while node.parent_id is not None:
            node = by_id[node.parent_id]
            hops += 1
            assert hops < 18
        assert node.segment_label == "wrist_hub"


def test_topology_labels_match_hand_segments():
    labels = set(hand_topology().labels)
    for f in ("index", "middle", "ring", "pinky"):
        assert {f"{f}_PP", f"{f}_MP", f"{f}_DP"} <= labels
    assert {"thumb_MC", "thumb_PP", "thumb_DP", "palm", "forearm", "wrist_hub"} <= labels


@pytest.mark.parametrize(
    "nodes",
    [
        (SensorNode(0, "a"), SensorNode(0, "b", 0)),
        (SensorNode(0, "a"), SensorNode(1, "a", 0)),
        (SensorNode(0, "a"), SensorNode(1, "b")),
        (SensorNode(0, "a", 1), SensorNode(1, "b", 0)),
        (SensorNode(0, "a"), SensorNode(1, "b", 7)),
        (),
    ],
)
def test_topology_rejects_non_trees(nodes):
    with pytest.raises(ValueError):
        SensorTopology(nodes)


# ---------------------------------------------------------------------- clock


def test_ideal_clock_is_identity():
    t = np.linspace(0, 140, 101)
    np.testing.assert_array_equal(local_clock(IDEAL, t), t)


def test_ppm_offset_closed_form():
    osc = OscillatorModel(freq_offset=100.0)
    assert abs((local_clock(osc, 140.0) - 140.0) - 0.014) < 1e-12


def test_initial_offset_adds():
    osc = OscillatorModel(freq_offset=-20.0, initial_offset=0.25)
    assert abs(local_clock(osc, 10.0) - (10.0 * (1 - 20e-6) + 0.25)) < 1e-12


def test_random_walk_variance_linear_in_time():
    """Phase-walk variance is (walk * 1e-6)^2 * t: fit over 1000 seeded walks."""
    osc = OscillatorModel(random_walk=5.0)
    ts = np.array([5.0, 10.0, 20.0, 40.0])
    vals = np.array([sample_phase_walk(osc, 40.0, derive_rng(7, 1, k))(ts) for k in range(1000)])
    var = vals.var(axis=0)
    expected = (5e-6) ** 2 * ts
    np.testing.assert_allclose(var / expected, 1.0, atol=0.15)
    slope, intercept = np.polyfit(ts, var, 1)
    assert abs(intercept) < 0.1 * var[-1]
    assert abs(slope / (5e-6) ** 2 - 1.0) < 0.15


def test_drifting_clock_master_inverts_local():
    osc = OscillatorModel(freq_offset=80.0, random_walk=5.0, initial_offset=0.01)
    clock = DriftingClock(osc, 20.0, derive_rng(0, 1), derive_rng(0, 2))
    t = np.linspace(0, 20, 2001)
    np.testing.assert_allclose(clock.master(clock.local(t)), t, atol=1e-12)
    assert np.all(np.diff(clock.local(t)) > 0)


def test_oscillator_validation():
    for kw in ({"nominal_rate": 0}, {"random_walk": -1}, {"latch_jitter": -1e-6}, {"freq_offset": math.inf}):
        with pytest.raises(ValueError):
            OscillatorModel(**kw)


def test_default_oscillators_range_and_determinism():
    topo = hand_topology()
    a = default_oscillators(topo, 3)
    b = default_oscillators(topo, 3)
    assert a == b
    assert all(-100 <= o.freq_offset <= 100 for o in a.values())
    assert default_oscillators(topo, 4) != a


# --------------------------------------------------------------------- latching


def test_latch_ideal_equals_master():
    clocks = {i: DriftingClock(IDEAL, 20.0) for i in range(18)}
    a = broadcast_latch(12_345_678, clocks, 3)
    assert a.anchor_id == 3 and a.t_master == 12_345_678
    assert set(a.latched.values()) == {12_345_678}


def test_latch_single_node_50ppm():
    clock = DriftingClock(OscillatorModel(freq_offset=50.0), 20.0)
    assert broadcast_latch(10_000_000, {0: clock}).latched[0] == 10_000_500


def test_latch_jitter_statistics():
    osc = OscillatorModel(latch_jitter=5e-6)
    clock = DriftingClock(osc, 20.0, latch_rng=derive_rng(11, 2, 0))
    res = np.array([clock.latch(1.0) - 1_000_000 for _ in range(10_000)], dtype=float)
    assert 4.5 <= res.std() <= 5.5
    assert abs(res.mean()) < 0.3


# ------------------------------------------------------------------------ motion


def test_static_motion_zero_rate():
    m = gen_motion("static", 5.0)
    t = np.linspace(0, 5, 50)
    for lab in hand_topology().labels:
        R, w = m.ground_truth(t, lab)
        assert np.array_equal(w, np.zeros_like(w))
        assert np.array_equal(R, np.broadcast_to(np.eye(3), R.shape))


def test_unknown_motion_rejected():
    with pytest.raises(ValueError):
        gen_motion("wave")
    with pytest.raises(ValueError):
        gen_motion("flip", frequency_hz=2)
    with pytest.raises(ValueError):
        gen_motion("flip", 0.0)


def test_flip_pitch_closed_form():
    m = gen_motion("flip", 4.0, frequency=1.5, amplitude=0.8)
    t = np.linspace(0, 4, 97)
    R, w = m.ground_truth(t, "index_MP")
    np.testing.assert_allclose(R, rot_x(0.8 * np.sin(3 * np.pi * t)), atol=1e-15)
    np.testing.assert_allclose(w[:, 0], 0.8 * 3 * np.pi * np.cos(3 * np.pi * t), atol=1e-13)


def test_chirp_at_fixed_frequency_oscillates_on_selected_segment_only():
    m = gen_motion("chirp", 2.0, f0=150.0, f1=150.0)
    fs = 8000.0
    t = np.arange(int(2.0 * fs)) / fs
    w = m.angular_velocity(t, "index_MP")
    spec = np.abs(np.fft.rfft(np.linalg.norm(w, axis=1) * np.sign(w[:, 0])))
    freqs = np.fft.rfftfreq(len(t), 1 / fs)
    assert abs(freqs[np.argmax(spec)] - 150.0) < 0.5
    for lab in ("index_PP", "index_DP", "middle_MP", "thumb_MC", "palm"):
        assert not np.any(m.angular_velocity(t, lab))


def test_burst_excluding_thumb_is_quiescent_there():
    m = gen_motion("burst", 4.0, centers=[1.0, 3.0], exclude=["thumb"])
    t = np.linspace(0, 4, 4001)
    for lab in ("thumb_MC", "thumb_PP", "thumb_DP"):
        assert not np.any(m.angular_velocity(t, lab))
    assert np.abs(m.angular_velocity(t, "index_PP")).max() > 1.0


def _five_point_rate(m, t, lab, h=1e-5):
    """Body rate from a five-point stencil on s -> log(R(t)^T R(t+s))."""
    R0 = m.orientation(t, lab)
    f = lambda s: log_so3(np.swapaxes(R0, -1, -2) @ m.orientation(t + s, lab))  # noqa: E731
    return (8 * f(h) - 8 * f(-h) - f(2 * h) + f(-2 * h)) / (12 * h)


@pytest.mark.parametrize(
    "kind,params,lab",
    [
        ("flip", {}, "middle_PP"),
        ("chirp", {}, "index_MP"),
        ("chirp", {"axis": (0.3, -0.5, 0.8), "bias": 1.0}, "index_MP"),
        ("burst", {"centers": [0.5, 0.52]}, "ring_DP"),
    ],
)
def test_rate_consistent_with_orientation_derivative(kind, params, lab):
    m = gen_motion(kind, 1.0, **params)
    t = np.linspace(0.02, 0.98, 301)
    np.testing.assert_allclose(_five_point_rate(m, t, lab), m.angular_velocity(t, lab), atol=1e-6)


@pytest.mark.parametrize("kind", ["flip", "chirp", "burst"])
def test_rate_bound_holds(kind):
    m = gen_motion(kind, 2.0)
    t = np.linspace(0, 2, 20001)
    for lab in ("index_MP", "palm"):
        assert np.linalg.norm(m.angular_velocity(t, lab), axis=1).max() <= m.omega_bound + 1e-9


# ------------------------------------------------------------------- sessions


def test_single_ideal_static_session():
    s = simulate_session(_single(), IDEAL, gen_motion("static", 1.0), seed=5)
    st = s.samples[0]
    np.testing.assert_array_equal(st.t_local, np.arange(801) * 1250)
    np.testing.assert_array_equal(st.seq, np.arange(801))
    assert quat_distance(st.quat, st.quat[0]).max() == 0.0
    assert not np.any(st.gyro)


def test_ideal_clock_samples_at_master_time():
    topo = _single("index_MP")
    m = gen_motion("flip", 1.0, frequency=2.0)
    s = simulate_session(topo, IDEAL, m, seed=1)
    st = s.samples[0]
    t = st.t_local * 1e-6
    R_expected = sensor_reading(m.orientation(t, "index_MP"), s.mounting[0])
    assert geodesic_distance(quat_to_matrix(st.quat), R_expected).max() < 1e-12
    np.testing.assert_allclose(st.gyro, m.angular_velocity(t, "index_MP") @ s.mounting[0].R_I_H.T, atol=1e-12)


def test_drifting_samples_fire_at_local_ticks():
    topo = _single("index_MP")
    osc = OscillatorModel(freq_offset=70.0, random_walk=5.0)
    m = gen_motion("flip", 3.0)
    s = simulate_session(topo, osc, m, seed=2)
    st, clock = s.samples[0], s.clocks[0]
    t_master = clock.master(st.t_local * 1e-6)
    R_expected = sensor_reading(m.orientation(t_master, "index_MP"), s.mounting[0])
    assert geodesic_distance(quat_to_matrix(st.quat), R_expected).max() < 1e-9


def test_anchor_count_and_order():
    s = simulate_session(hand_topology(), default_oscillators(hand_topology(), 0), gen_motion("static", 140.0), seed=0)
    assert len(s.anchors) == 141
    ids = [a.anchor_id for a in s.anchors]
    tm = [a.t_master for a in s.anchors]
    assert ids == sorted(ids) and len(set(ids)) == 141
    assert tm[0] == 0 and tm[-1] == 140_000_000 and np.all(np.diff(tm) > 0)
    assert all(len(a.latched) == 18 for a in s.anchors)


def test_final_offsets_match_closed_form():
    topo = hand_topology()
    oscs = default_oscillators(topo, 9, random_walk=0.0)
    s = simulate_session(topo, oscs, gen_motion("static", 140.0), seed=9)
    last = s.anchors[-1]
    for sid, osc in oscs.items():
        offset = (last.latched[sid] - last.t_master) * 1e-6
        assert abs(offset - osc.freq_offset * 1e-6 * 140.0) < 5 * 5e-6 + 1e-6


@pytest.mark.parametrize("ppm", [-300.0, -100.0, 0.0, 100.0, 300.0])
def test_sample_count_bounds(ppm):
    T = 20.0
    s = simulate_session(_single(), OscillatorModel(freq_offset=ppm, random_walk=5.0), gen_motion("static", T), seed=4)
    n = len(s.samples[0])
    assert math.floor(T * 800 * (1 - 3e-4)) <= n <= math.ceil(T * 800 * (1 + 3e-4)) + 1


def test_noise_free_clocks_give_master_timestamps():
    s = simulate_session(hand_topology(), IDEAL, gen_motion("flip", 2.0), seed=3)
    for st in s.samples.values():
        np.testing.assert_array_equal(st.t_local, np.arange(1601) * 1250)
    for a in s.anchors:
        assert set(a.latched.values()) == {a.t_master}


def test_sample_stream_invariants():
    s = simulate_session(hand_topology(), default_oscillators(hand_topology(), 1), gen_motion("flip", 5.0), seed=1)
    for st in s.samples.values():
        st.validate()
        assert np.all(np.diff(st.seq) > 0)
        assert np.all(np.diff(st.t_local) >= 0)
        np.testing.assert_allclose(np.linalg.norm(st.quat, axis=1), 1.0, atol=1e-12)


def test_ground_truth_continuity():
    m = gen_motion("chirp", 3.0)
    s = simulate_session(hand_topology(), IDEAL, m, seed=0)
    for i, lab in enumerate(s.truth.labels):
        steps = quat_distance(s.truth.quat[i, :-1], s.truth.quat[i, 1:])
        assert steps.max() < m.omega_bound / 800 + 1e-9


def test_session_determinism_bit_identical():
    topo = hand_topology()
    runs = [
        simulate_session(topo, default_oscillators(topo, 21), gen_motion("flip", 3.0), seed=21, orientation_noise=1e-3, gyro_noise=1e-3)
        for _ in range(2)
    ]
    for sid in topo.ids:
        a, b = runs[0].samples[sid], runs[1].samples[sid]
        for f in ("seq", "t_local", "quat", "gyro"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
    assert [x.latched for x in runs[0].anchors] == [x.latched for x in runs[1].anchors]


def test_sensor_streams_use_independent_noise():
    topo = hand_topology()
    s = simulate_session(topo, IDEAL, gen_motion("static", 1.0), seed=0, gyro_noise=1.0)
    g0, g1 = s.samples[0].gyro, s.samples[1].gyro
    assert abs(np.corrcoef(g0[:, 0], g1[:, 0])[0, 1]) < 0.15


def test_session_rejects_bad_inputs():
    with pytest.raises(ValueError):
        simulate_session(None, IDEAL, gen_motion("static", 1.0))
    with pytest.raises(ValueError):
        simulate_session(_single(), IDEAL, gen_motion("static", 1.0), anchor_period=0.0)
    with pytest.raises(ValueError):
        simulate_session(hand_topology(), {0: IDEAL}, gen_motion("static", 1.0))


def test_random_mounting_is_valid_and_seeded():
    topo = hand_topology()
    a, b = random_mounting(topo, 3), random_mounting(topo, 3)
    for sid in topo.ids:
        assert a[sid].theta == b[sid].theta
        assert np.array_equal(a[sid].R_I_H, b[sid].R_I_H)
        R = a[sid].R_I_H
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_sensor_reading_inverts_calibration_chain():
    mount = random_mounting(_single(), 0)[0]
    R_WH = exp_so3([0.3, -0.2, 0.9])
    R = sensor_reading(R_WH, mount)
    np.testing.assert_allclose(rot_z(mount.theta) @ R @ mount.R_I_H, R_WH, atol=1e-14)


def test_captures_are_static_windows():
    topo = hand_topology()
    mount = random_mounting(topo, 1)
    win = simulate_captures(topo, mount, alpha=1.0, window=0.1)
    assert set(win) == {"zero", "start", "end"}
    for pose, streams in win.items():
        for sid, st in streams.items():
            assert len(st) == 80
            assert quat_distance(st.quat, st.quat[0]).max() < 1e-15
    R_end = quat_to_matrix(win["end"][5].quat[0])
    np.testing.assert_allclose(rot_z(mount[5].theta) @ R_end @ mount[5].R_I_H, rot_x(1.0), atol=1e-14)


def test_anchor_record_is_plain_data():
    a = AnchorRecord(1, 10, {0: 11})
    assert a.latched[0] == 11
