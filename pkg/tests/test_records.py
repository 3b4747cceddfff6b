"""Header + tab-separated record files."""
import gzip
import json

import numpy as np
import polars as pl
import pytest
from hypothesis import given
from hypothesis import strategies as st

from handsync.records import (
    FIELDS,
    RecordFormatError,
    read_aligned,
    read_anchors,
    read_drift,
    read_ground_truth,
    read_hand_frames,
    read_joints,
    read_records,
    read_samples,
    read_spectrum,
    read_targets,
    write_aligned,
    write_anchors,
    write_drift,
    write_ground_truth,
    write_hand_frames,
    write_joints,
    write_records,
    write_samples,
    write_spectrum,
    write_targets,
)
from handsync.simnet import OscillatorModel, default_oscillators, gen_motion, hand_topology, simulate_session
from handsync.spatialcal import HandFrameSeries
from handsync.spectral import BandEnergyProfile
from handsync.timesync import ClockSynchronizer


@pytest.fixture(scope="module")
def session():
    topo = hand_topology()
    return simulate_session(
        topo, default_oscillators(topo, 3), gen_motion("flip", 2.0), seed=3, orientation_noise=1e-3, gyro_noise=1e-3
    )


def _lines(path):
    data = open(path, "rb").read()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data.decode().splitlines()


def test_header_layout(tmp_path, session):
    path = tmp_path / "anchors.tsv"
    write_anchors(path, session.anchors, meta={"seed": 3})
    lines = _lines(path)
    header = json.loads(lines[0])
    assert header == {
        "fields": [list(f) for f in FIELDS["anchor"]],
        "format_version": 1,
        "meta": {"seed": 3},
        "record_kind": "anchor",
    }
    assert lines[0] == json.dumps(header, sort_keys=True)
    assert len(lines) == 1 + 3 * 18
    first = session.anchors[0]
    assert lines[1].split("\t") == ["0", str(first.t_master), "0", str(first.latched[0])]


@pytest.mark.parametrize("suffix", [".tsv", ".tsv.gz"])
def test_samples_round_trip_bitwise(tmp_path, session, suffix):
    path = tmp_path / f"samples{suffix}"
    write_samples(path, session.samples, meta={"rate_hz": 800.0})
    back, meta = read_samples(path)
    assert meta == {"rate_hz": 800.0}
    assert sorted(back) == sorted(session.samples)
    for sid, s in session.samples.items():
        b = back[sid]
        for f in ("seq", "t_local", "quat", "gyro"):
            assert np.array_equal(getattr(b, f), getattr(s, f))


def test_float_tokens_parse_back_exactly(tmp_path, session):
    """Independent of the reader: every written float token is the shortest repr of the stored value."""
    path = tmp_path / "s.tsv"
    write_samples(path, {0: session.samples[0]})
    s = session.samples[0]
    for k, line in enumerate(_lines(path)[1:50]):
        parts = line.split("\t")
        vals = [float(v) for v in parts[3:]]
        np.testing.assert_array_equal(vals, np.r_[s.quat[k], s.gyro[k]])
        assert all(tok == repr(float(tok)) or "e" in tok for tok in parts[3:])


def test_gzip_output_is_reproducible(tmp_path, session):
    a, b = tmp_path / "a.tsv.gz", tmp_path / "b.tsv.gz"
    write_anchors(a, session.anchors)
    write_anchors(b, session.anchors)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[4:8] == b"\x00\x00\x00\x00"  # mtime


def test_anchor_round_trip(tmp_path, session):
    path = tmp_path / "anchors.tsv"
    write_anchors(path, session.anchors)
    back, _ = read_anchors(path)
    assert [(a.anchor_id, a.t_master, a.latched) for a in back] == [
        (a.anchor_id, a.t_master, a.latched) for a in session.anchors
    ]


def test_ground_truth_round_trip(tmp_path, session):
    path = tmp_path / "gt.tsv"
    write_ground_truth(path, session.truth)
    back, meta = read_ground_truth(path)
    assert back.labels == list(session.truth.labels) == meta["labels"]
    assert np.array_equal(back.quat, session.truth.quat)
    assert np.array_equal(back.omega, session.truth.omega)
    assert np.array_equal(back.t_master, session.truth.t_master)


def test_aligned_round_trip_with_nan(tmp_path, session):
    aligned = ClockSynchronizer().fit_transform(session.anchors, session.samples)
    assert not aligned.valid.all()
    path = tmp_path / "aligned.tsv.gz"
    write_aligned(path, aligned)
    back, meta = read_aligned(path)
    assert back.grid == aligned.grid and back.sensor_ids == aligned.sensor_ids
    assert np.array_equal(back.valid, aligned.valid)
    assert np.array_equal(back.quat, aligned.quat, equal_nan=True)
    assert np.array_equal(back.gyro, aligned.gyro, equal_nan=True)
    assert meta["grid"]["count"] == aligned.grid.count


def test_hand_frames_round_trip(tmp_path, session):
    aligned = ClockSynchronizer().fit_transform(session.anchors, session.samples)
    labels = [session.topology.label_of(s) for s in aligned.sensor_ids]
    hand = HandFrameSeries(aligned.grid, labels, aligned.quat, aligned.valid)
    path = tmp_path / "hand.tsv"
    write_hand_frames(path, hand)
    back, _ = read_hand_frames(path)
    assert back.labels == labels
    assert np.array_equal(back.quat, hand.quat, equal_nan=True)


def test_drift_spectrum_targets_joints(tmp_path, session):
    sync = ClockSynchronizer().fit(session.anchors)
    rep = sync.drift_report(truth=session.clocks)
    write_drift(tmp_path / "d.tsv", rep)
    off, meta = read_drift(tmp_path / "d.tsv")
    assert np.array_equal(off, rep.offsets)
    assert meta["mapping_error"]["0"] == rep.mapping_error[0]

    prof = BandEnergyProfile(np.array([0.16, 0.18]), ["a", "b b"], np.array([[0.0, 1.5], [np.nan, 2e-300]]), 100.0)
    write_spectrum(tmp_path / "s.tsv", prof)
    back, _ = read_spectrum(tmp_path / "s.tsv")
    assert back.labels == ["a", "b b"] and back.f_min == 100.0
    assert np.array_equal(back.energy, prof.energy, equal_nan=True)

    tips = np.random.default_rng(0).normal(size=(3, 4, 3))
    write_targets(tmp_path / "t.tsv", [0.0, 0.1, 0.2], tips)
    times, back_tips, _ = read_targets(tmp_path / "t.tsv")
    assert np.array_equal(back_tips, tips) and np.array_equal(times, [0.0, 0.1, 0.2])

    q = np.random.default_rng(1).normal(size=(3, 2))
    write_joints(tmp_path / "j.tsv", [0, 0.1, 0.2], ["a_f0", "a_f1"], q, [1e-9, 0, 0.03], [3, 0, 7], [True, True, False])
    j = read_joints(tmp_path / "j.tsv")
    assert j["joint_names"] == ["a_f0", "a_f1"]
    assert np.array_equal(j["q"], q)
    assert j["converged"].tolist() == [True, True, False]
    assert j["iterations"].tolist() == [3, 0, 7]


@given(st.lists(st.floats(allow_nan=True, allow_infinity=True, width=64), min_size=1, max_size=30))
def test_arbitrary_floats_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("f") / "drift.tsv"
    n = len(values)
    frame = pl.DataFrame({"sensor_id": np.arange(n), "t_master_s": np.asarray(values), "offset_s": np.zeros(n)})
    write_records(path, "drift", frame)
    _, back = read_records(path, "drift")
    got = back["t_master_s"].to_numpy()
    want = np.asarray(values)
    assert np.array_equal(got, want, equal_nan=True)
    assert np.array_equal(np.signbit(got[~np.isnan(got)]), np.signbit(want[~np.isnan(want)]))


def _corrupt(path, lineno, new):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = new
    path.write_text("\n".join(lines) + "\n")


def test_malformed_lines_reported_by_number(tmp_path, session):
    path = tmp_path / "a.tsv"
    write_anchors(path, session.anchors)
    _corrupt(path, 5, "1\t1000000\t2")
    with pytest.raises(RecordFormatError, match="line 5: expected 4 fields, found 3"):
        read_anchors(path)
    write_anchors(path, session.anchors)
    _corrupt(path, 7, "2\t2000000\tx\t5")
    with pytest.raises(RecordFormatError, match="line 7: field 'sensor_id'"):
        read_anchors(path)
    write_anchors(path, session.anchors)
    _corrupt(path, 3, "0\t0\t2\t")
    with pytest.raises(RecordFormatError, match="line 3"):
        read_anchors(path)


def test_header_errors(tmp_path, session):
    path = tmp_path / "a.tsv"
    write_anchors(path, session.anchors)
    with pytest.raises(RecordFormatError, match="expected 'sample'"):
        read_samples(path)
    text = path.read_text().splitlines()
    hdr = json.loads(text[0])
    hdr["format_version"] = 99
    path.write_text("\n".join([json.dumps(hdr)] + text[1:]) + "\n")
    with pytest.raises(RecordFormatError, match="format_version"):
        read_anchors(path)
    path.write_text("not json\n")
    with pytest.raises(RecordFormatError, match="line 1"):
        read_anchors(path)
    with pytest.raises(ValueError):
        write_records(path, "nonsense", pl.DataFrame())
    with pytest.raises(FileNotFoundError):
        read_anchors(tmp_path / "missing.tsv")


def test_empty_body(tmp_path):
    path = tmp_path / "s.tsv"
    write_samples(path, {})
    back, _ = read_samples(path)
    assert back == {}


def test_samples_must_be_grouped(tmp_path, session):
    path = tmp_path / "s.tsv"
    write_samples(path, {0: session.samples[0], 1: session.samples[1]})
    lines = path.read_text().splitlines()
    body = lines[1:]
    body[3], body[-1] = body[-1], body[3]
    path.write_text("\n".join([lines[0]] + body) + "\n")
    with pytest.raises(RecordFormatError):
        read_samples(path)


def test_ideal_session_timestamps_are_integers(tmp_path):
    topo = hand_topology()
    s = simulate_session(topo, OscillatorModel(), gen_motion("static", 0.01), seed=0)
    path = tmp_path / "s.tsv"
    write_samples(path, s.samples)
    tokens = [line.split("\t")[2] for line in _lines(path)[1:]]
    assert tokens[:3] == ["0", "1250", "2500"]
