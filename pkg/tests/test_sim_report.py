import json
from dataclasses import replace

import numpy as np
import pytest

from champfl import nn, report
from champfl.aggregation import AggregatorConfig
from champfl.attack import AttackConfig
from champfl.data import BackdoorSpec, Dataset, write_idx
from champfl.errors import ConfigError, FormatError, InputError
from champfl.sim import ExperimentConfig, RoundRecord, desk_profile, evaluate, krum_trace, load_datasets, run_experiment


def tiny(**kw):
    base = desk_profile(dataset="synthetic:10x150", train_size=None, rounds=3, local_epochs=1)
    return replace(base, **kw)


def champ():
    return AttackConfig(kind="champ", backdoor=BackdoorSpec(0, 1))


def test_evaluate_counts():
    spec = nn.ModelSpec("logistic", (1, 1, 1), classes=2)
    # class 1 wins exactly when the single pixel is lit
    model = nn.Model(spec, np.array([0.0, 10.0, 1.0, 0.0]))
    pix = np.zeros((489, 1, 1, 1))
    pix[:163] = 1.0
    triggered = Dataset(pix, np.zeros(489, int), 2)
    clean = Dataset(np.zeros((10, 1, 1, 1)), np.zeros(10, int), 2)
    acc, asr = evaluate(model, clean, triggered, 1)
    assert acc == 1.0
    assert asr == 163 / 489
    assert round(asr, 4) == 0.3333
    assert evaluate(model, clean, None, 1)[1] is None


def test_config_roundtrip_and_digest():
    cfg = tiny(attack=champ(), defense=AggregatorConfig.parse("multi_krum:m=3,f=1"))
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.digest() == cfg.digest()
    assert replace(cfg, seed=1).digest() != cfg.digest()


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(lr=0).validate()
    with pytest.raises(ConfigError):
        tiny(attack=AttackConfig(kind="vanilla", malicious_ids=(12,))).validate()
    with pytest.raises(InputError):
        tiny(attack=AttackConfig(kind="vanilla", backdoor=BackdoorSpec(0, 1, size=13))).validate()


def test_load_datasets_sizes_and_errors(tmp_path):
    train, test = load_datasets(desk_profile())
    assert len(train) == 10_000 and len(test) == 2000
    with pytest.raises(InputError, match="not found"):
        load_datasets(tiny(dataset=f"idx:{tmp_path}/a,{tmp_path}/b"))
    with pytest.raises(InputError):
        load_datasets(tiny(dataset="imagenet:1"))
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((4, 5, 5), np.uint8), np.zeros(4, np.uint8))
    with pytest.raises(InputError, match="do not match"):
        load_datasets(tiny(dataset=f"idx:{tmp_path}/i,{tmp_path}/l"))


def test_run_records_and_attack_isolation():
    cfg = tiny(attack=champ(), defense=AggregatorConfig("krum"))
    seen = []
    records, model = run_experiment(cfg, on_round=seen.append)
    assert [r.t for r in records] == [1, 2, 3] and seen == records
    assert records[0].v is None and records[0].alpha == 1.0
    assert all(0 <= r.v <= 1 for r in records[1:])
    assert all(r.alpha == pytest.approx(1 - np.mean([x.v for x in records[1 : r.t]][-3:])) for r in records[1:])
    assert all(len(r.selected) == 1 and len(r.scores) == 10 for r in records)
    assert model.params.shape == (cfg.model.num_params,)


def test_vanilla_and_no_attack_have_no_alpha():
    for kind in ("none", "vanilla"):
        rec, _ = run_experiment(tiny(rounds=1, attack=AttackConfig(kind=kind)))
        assert rec[0].v is None and rec[0].alpha is None and rec[0].selected is None


def test_champ_with_fedavg_completes():
    rec, _ = run_experiment(tiny(rounds=2, attack=champ()))
    assert rec[-1].asr is not None and rec[-1].alpha is not None


def test_eval_cadence():
    rec, _ = run_experiment(tiny(rounds=3, eval_every=2))
    assert [r.benign_acc is None for r in rec] == [True, False, False]


def test_krum_trace():
    recs = [
        RoundRecord(1, 0.5, 0.1, selected=[0], scores=[1.0, 2.0, 3.0]),
        RoundRecord(2, 0.5, 0.1, selected=[1], scores=[5.0, 2.0, 3.0]),
    ]
    trace = krum_trace(recs, 0, "krum")
    assert [(e["rank"], e["selected"]) for e in trace] == [(1, True), (3, False)]
    assert krum_trace(recs, 0, "fedavg") == []
    assert krum_trace(recs, 0, "align_ins")[0]["rank"] == 3


# --------------------------------------------------------------------------- report


def _records():
    return [
        RoundRecord(1, 0.5, 0.25, v=None, alpha=1.0, selected=[2], scores=[0.1, 1 / 3, 2.0]),
        RoundRecord(2, None, None, v=0.125, alpha=0.875),
        RoundRecord(3, 0.75, 0.9999999, v=1.0, alpha=0.0, selected=[0, 1], scores=[1e-9, 3.0, 4.0]),
    ]


def test_jsonl_roundtrip_and_keys(tmp_path):
    path = tmp_path / "r.jsonl"
    report.write_round_jsonl(_records(), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert all(set(json.loads(line)) == set(report.ROUND_KEYS) for line in lines)
    assert [r.to_json() for r in report.read_round_jsonl(path)] == [r.to_json() for r in _records()]
    report.write_round_jsonl([], path)
    assert path.read_text() == ""
    path.write_text('{"t": 1}\n')
    with pytest.raises(FormatError):
        report.read_round_jsonl(path)


def test_summary_fields_and_precision():
    cfg = tiny(rounds=3, attack=champ(), defense=AggregatorConfig("krum"))
    s = report.summarize(_records(), cfg)
    assert (s.defense, s.attack, s.prox, s.trigger) == ("krum", "champ", "euclidean", "3x3")
    assert s.asr_mid == 0.25 and s.asr_final == 0.9999999
    text = report.summary_csv_text([s])
    assert text.splitlines()[0] == ",".join(report.SUMMARY_COLUMNS)
    assert "0.9999999" in text


def test_summary_grid_has_one_row_per_cell():
    sums = []
    for rule in ("fedavg", "krum"):
        for kind in ("vanilla", "champ"):
            cfg = tiny(attack=AttackConfig(kind=kind), defense=AggregatorConfig(rule))
            sums.append(report.summarize(_records(), cfg))
    rows = report.summary_csv_text(sums).splitlines()[1:]
    assert len(rows) == 4 and len(set(rows)) == 4


def test_rounds_table_has_summary_row():
    rows = report.rounds_table_text(_records(), report.summarize(_records())).splitlines()
    assert len(rows) == 1 + 3 + 1
    assert rows[-1].startswith("summary,0.75,")


def test_out_dir_resolution(monkeypatch, tmp_path):
    cfg = tiny()
    assert report.resolve_out_dir(cfg, tmp_path / "x") == tmp_path / "x"
    monkeypatch.setenv(report.OUT_ENV, str(tmp_path))
    assert report.resolve_out_dir(cfg) == tmp_path / cfg.digest()
    monkeypatch.delenv(report.OUT_ENV)
    assert str(report.resolve_out_dir(cfg)).startswith("runs")


def test_run_to_dir_is_deterministic(tmp_path):
    cfg = tiny(rounds=2, attack=champ(), defense=AggregatorConfig("multi_krum"))
    report.run_to_dir(cfg, tmp_path / "a")
    report.run_to_dir(cfg, tmp_path / "b")
    for name in ("rounds.jsonl", "summary.csv", "config.json", "final.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert report.read_config(tmp_path / "a" / "config.json") == cfg
    assert nn.load_checkpoint(tmp_path / "a" / "final.ckpt").spec == cfg.model
