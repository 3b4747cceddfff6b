"""Session configuration parsing and validation."""
import json
from pathlib import Path

import pytest

from handsync.config import ConfigError, SessionConfig, dump_config, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    cfg = parse_config({})
    assert cfg.seed == 0 and cfg.duration_s == 140.0 and cfg.anchor_period_s == 1.0
    assert cfg.oscillators.offset_range_ppm == 100.0 and cfg.oscillators.random_walk_ppm == 5.0
    assert cfg.oscillators.latch_jitter_s == 5e-6 and cfg.oscillators.nominal_rate_hz == 800.0
    assert cfg.sync.rate_hz == 800.0 and not cfg.sync.baseline
    assert (cfg.spectrum.f_min_hz, cfg.spectrum.window_length, cfg.spectrum.hop) == (100.0, 256, 16)
    assert cfg.calibration.threshold == 0.05
    assert cfg.motion.kind == "flip"


@pytest.mark.parametrize("name", ["default.json", "static.json", "burst.json"])
def test_committed_examples_parse(name):
    cfg = load_config(CONFIGS / name)
    assert isinstance(cfg, SessionConfig)
    assert parse_config(dump_config(cfg)) == cfg


def test_default_example_matches_defaults():
    assert load_config(CONFIGS / "default.json") == parse_config({})


def test_dump_is_json_serializable():
    doc = dump_config(parse_config({"oscillators": {"overrides": {"3": {"freq_offset_ppm": 40}}}}))
    assert json.loads(json.dumps(doc))["oscillators"]["overrides"]["3"]["freq_offset_ppm"] == 40


@pytest.mark.parametrize(
    "doc,fragment",
    [
        ({"sedd": 1}, "sedd: unknown field"),
        ({"duration_s": -1}, "duration_s"),
        ({"oscillators": {"overrides": {"3": {"x": 1}}}}, "oscillators.overrides.3.x: unknown field"),
        ({"motion": {"kind": "wave"}}, "motion.kind"),
        ({"motion": {"kind": "flip", "params": {"freq": 2}}}, "motion"),
        ({"spectrum": {"mode": "fft"}}, "spectrum.mode"),
        ({"calibration": {"alpha_deg": 180}}, "calibration.alpha_deg"),
        ({"retarget": {"hand": "shadow"}}, "retarget.hand"),
        ({"noise": {"gyro_rad_s": -0.1}}, "noise.gyro_rad_s"),
        ([], "<root>"),
    ],
)
def test_invalid_documents_name_the_field(doc, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    assert fragment in str(info.value)


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n "duration_s": }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text('{"seed": "abc"}')
    with pytest.raises(ConfigError, match="wrong.json: seed"):
        load_config(wrong)


def test_config_is_immutable():
    cfg = parse_config({})
    with pytest.raises(Exception):
        cfg.seed = 3
