import csv
import json
import os

import pytest

from mmfl.config import ConfigError
from mmfl.experiment import (FILES, SCENARIOS, CompareError, ScenarioError, compare_scenarios, emit_metrics,
                             load_record, parse_scenario, resolve, run_scenario, RunRecord)

from conftest import tiny_config

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "headers.json")


def test_parse_scenarios():
    for name in SCENARIOS:
        assert parse_scenario(name).name == name
    s = parse_scenario("mmfl-drl-attack@gru28")
    assert (s.multi_model, s.selector, s.attack, s.master) == (True, "drl", True, "gru28")
    with pytest.raises(ScenarioError):
        parse_scenario("mmfl-best-attack")


def test_resolve_single_model():
    cfg = resolve(tiny_config(), parse_scenario("fl-single-attack"))
    assert cfg.slave_ids == ["large"] and cfg.fl.t_max == 1.0 and cfg.attack.enabled
    cfg = resolve(tiny_config(), parse_scenario("mmfl-static-noattack"))
    assert cfg.selector.static_model == "small" and not cfg.attack.enabled


def test_labels_follow_legend():
    specs_cfg = tiny_config()
    r = run_scenario(specs_cfg, "fl-single-attack", seed=1)
    assert r.label == "FL-GRU 5-With Attack"
    r = run_scenario(specs_cfg, "mmfl-rnd-attack@small", seed=1)
    assert r.label == "MM-FL-RND (Master: GRU 3)"


def test_smoke_one_device_one_epoch(tmp_path):
    cfg = tiny_config(n_devices=1, epochs=1)
    cfg.attack = cfg.attack.__class__(enabled=False, compromised_min=0, compromised_max=0)
    record = run_scenario(cfg, "fl-single-noattack", seed=0)
    emit_metrics(record, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "accuracy.csv")))
    assert len(rows) == 1 and rows[0]["scenario"] == "fl-single-noattack"


def test_invalid_config_runs_nothing():
    cfg = tiny_config()
    cfg.fl.epochs = 0
    with pytest.raises(ConfigError):
        run_scenario(cfg, "fl-single-noattack")
    with pytest.raises(ConfigError):
        run_scenario(tiny_config(), "fl-single-noattack@ghost")


def test_drl_run_records_training_curve():
    cfg = tiny_config()
    record = run_scenario(cfg, "mmfl-drl-attack", seed=2)
    rep = record.repetitions[0]
    assert len(rep.training) == cfg.episodes
    assert len(record.reward_curve()) == cfg.episodes + 1
    assert rep.beta > 0 and rep.t_ref > 0
    for m in rep.evaluation.epochs:
        assert sum(1 for i in m.plan if i == 1) <= int(cfg.network.n_devices * cfg.fl.t_max)


def test_repetitions_use_offset_seeds():
    cfg = tiny_config()
    cfg.repetitions = 2
    record = run_scenario(cfg, "fl-single-noattack", seed=5)
    assert [r.seed for r in record.repetitions] == [5, 6]


def test_emit_headers_match_golden(tmp_path):
    record = run_scenario(tiny_config(), "mmfl-rnd-attack", seed=0)
    emit_metrics(record, tmp_path)
    headers = {name: next(csv.reader(open(tmp_path / name))) for name in FILES}
    with open(GOLDEN) as fh:
        assert headers == json.load(fh)
    manifest = json.load(open(tmp_path / "run.json"))
    assert manifest["seed"] == 0 and manifest["config"]["fl"]["epochs"] == 2
    assert len(manifest["beta"]) == 1


def test_empty_record_gives_header_only_files(tmp_path):
    emit_metrics(RunRecord("x", "x", 0, {}), tmp_path)
    for name in FILES:
        assert len(open(tmp_path / name).read().splitlines()) == 1


def test_reemit_identical(tmp_path):
    record = run_scenario(tiny_config(), "fl-single-attack", seed=0)
    emit_metrics(record, tmp_path / "a")
    emit_metrics(record, tmp_path / "b")
    for name in list(FILES) + ["run.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_metrics(RunRecord("x", "x", 0, {}), blocker / "sub")


def test_compare_identical_and_ordering(tmp_path):
    a = run_scenario(tiny_config(), "fl-single-noattack", seed=0)
    b = run_scenario(tiny_config(), "fl-single-noattack", seed=0)
    summary = compare_scenarios([a, b])
    for per in summary.deltas.values():
        assert all(d == 0 for series in per.values() for d in series)
    c = run_scenario(tiny_config(), "fl-single-attack", seed=0)
    emit_metrics(a, tmp_path / "a")
    emit_metrics(c, tmp_path / "c")
    loaded = [load_record(tmp_path / "a"), load_record(tmp_path / "c")]
    assert loaded[0].accuracy == a.accuracy_curve()
    ok = compare_scenarios(loaded, [{"metric": "accuracy", "order": ["fl-single-noattack", "fl-single-attack"],
                                     "tolerance": 1.0}])
    assert ok.violations == []
    impossible = compare_scenarios(loaded, [{"metric": "timing", "order": ["fl-single-noattack", "fl-single-attack"],
                                             "epochs": "all", "tolerance": -1.0}])
    assert len(impossible.violations) == 2
    assert "VIOLATION" in impossible.table()


def test_compare_errors():
    a = run_scenario(tiny_config(), "fl-single-noattack", seed=0)
    b = run_scenario(tiny_config(epochs=3), "fl-single-noattack", seed=0)
    with pytest.raises(CompareError, match="epoch mismatch"):
        compare_scenarios([a, b])
    with pytest.raises(CompareError):
        compare_scenarios([a])
