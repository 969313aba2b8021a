import json

import pytest

from mmfl.config import ConfigError, ExperimentConfig, derive_rng, from_dict, load_config, validate


def test_defaults_are_valid():
    assert validate(ExperimentConfig()) == []


def test_round_trip_through_json(tmp_path):
    cfg = ExperimentConfig()
    cfg.seed = 7
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.attack.lr_range == (0.25, 0.35)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        from_dict({"fl": {"epochz": 3}})
    with pytest.raises(ConfigError, match="top-level"):
        from_dict({"bogus": 1})


def test_validation_reports_every_problem():
    cfg = ExperimentConfig()
    cfg.models.master = "nope"
    cfg.fl.t_max = 1.5
    cfg.selector.kind = "magic"
    cfg.network.n_devices = 0
    errors = validate(cfg)
    joined = "\n".join(errors)
    for needle in ("master 'nope'", "t_max", "unknown kind", "n_devices"):
        assert needle in joined
    assert len(errors) >= 4


def test_cross_references():
    cfg = ExperimentConfig()
    cfg.models.slaves = ["gru28", "missing"]
    assert any("slave 'missing'" in e for e in validate(cfg))
    cfg = ExperimentConfig()
    cfg.fl.knowledge_transfer = False
    cfg.models.slaves = ["gru28"]
    assert any("without knowledge transfer" in e for e in validate(cfg))


def test_attack_bounds_checked_against_devices():
    cfg = ExperimentConfig()
    cfg.network.n_devices = 4
    assert any(e.startswith("attack:") for e in validate(cfg))


def test_derived_streams_are_stable_and_distinct():
    a = derive_rng(3, "data").random(4)
    assert (a == derive_rng(3, "data").random(4)).all()
    assert not (a == derive_rng(3, "init").random(4)).all()
    assert not (a == derive_rng(4, "data").random(4)).all()
