import json

import pytest

from tsjepa.config import (ConfigError, ExperimentConfig, apply_overrides, config_hash, from_dict, load_config,
                           to_dict)


def test_round_trip_lossless():
    cfg = ExperimentConfig()
    text = json.dumps(to_dict(cfg))
    assert from_dict(json.loads(text)) == cfg
    assert config_hash(from_dict(json.loads(text))) == config_hash(cfg)


def test_layered_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"jepa": {"epochs": 7}, "scheduler": {"omega2": 0.25}}))
    cfg = load_config(p, ["scheduler.omega2=0.75", "sweep.device_counts=[1,2]", "episode.loss_prob=null"])
    assert cfg.jepa.epochs == 7
    assert cfg.scheduler.omega2 == 0.75
    assert cfg.sweep.device_counts == (1, 2)
    assert cfg.episode.loss_prob is None
    assert cfg.jepa.embed_dim == 32


@pytest.mark.parametrize("bad", ["scheduler.nope=1", "nope.x=1", "scheduler=3=4x", "noequals"])
def test_unknown_keys_named(bad):
    with pytest.raises(ConfigError) as e:
        load_config(None, [bad])
    if "=" in bad:
        assert bad.split("=")[0].split(".")[0] in str(e.value) or "scheduler" in str(e.value)


def test_invalid_values_name_the_section():
    with pytest.raises(ConfigError, match="scheduler"):
        load_config(None, ["scheduler.omega1=-1"])
    with pytest.raises(ConfigError, match="episode"):
        load_config(None, ["episode.policy=\"lottery\""])


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text(json.dumps({"jepa": {"width": 3}}))
    with pytest.raises(ConfigError, match="jepa.width"):
        load_config(bad)


def test_string_values_pass_through():
    assert apply_overrides({"a": {"b": 1}}, ["a.b=round-robin"]) == {"a": {"b": "round-robin"}}
