import json

import numpy as np
import pytest
import yaml
from conftest import randomize_adapters, small_experiment, tiny_config

from fedlora_sim.checkpoint import load_checkpoint, save_checkpoint
from fedlora_sim.config import (
    OUTPUT_ENV,
    ExperimentConfig,
    from_dict,
    parse_config,
    parse_overrides,
    serialize_config,
    to_dict,
)
from fedlora_sim.errors import ConfigError, ShapeError
from fedlora_sim.federation import run_experiment
from fedlora_sim.harness import (
    CSV_COLUMNS,
    cost_report,
    emit_csv,
    main,
    parse_strategy,
    read_csv,
    run_grid,
)
from fedlora_sim.model import init_model
from fedlora_sim.numerics import RngStream


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(serialize_config(cfg))
    return path


# --- config ----------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg == ExperimentConfig()
    assert (cfg.model.r, cfg.model.alpha, cfg.model.dropout_p) == (16, 16, 0.1)
    assert (cfg.schedule.T_RGD, cfg.schedule.T_FIM) == (50, 50)
    assert (cfg.federation.s, cfg.federation.tau) == (10, 1)


def test_round_trip(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = small_experiment(**{"schedule.strategy": "CoDesign"})
    back = parse_config(write_config(tmp_path, cfg))
    assert back == cfg
    assert back.schedule.strategy == "CoDesign"
    assert serialize_config(back) == serialize_config(cfg)


def test_negative_rounds_named(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("federation:\n  T: -3\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert any("federation.T" in p for p in info.value.problems)


def test_all_problems_reported(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("federation:\n  T: -1\n  s: 0\nmodel:\n  banana: 3\nextra: 1\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    text = " ".join(info.value.problems)
    assert "model.banana" in text and "extra" in text


def test_type_errors_reported():
    with pytest.raises(ConfigError) as info:
        from_dict({"federation": {"T": 2.5, "lr": "fast"}})
    assert len(info.value.problems) == 2


def test_bad_yaml_and_missing(tmp_path):
    path = tmp_path / "x.yaml"
    path.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        parse_config(path)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.yaml")


def test_overrides():
    assert parse_overrides(["schedule.T_FIM=10", "partition.mode=LabelSkew", "capability.levels=[2, 4]"]) == {
        "schedule.T_FIM": 10, "partition.mode": "LabelSkew", "capability.levels": [2, 4],
    }
    cfg = ExperimentConfig().with_overrides({"schedule.T_FIM": 10})
    assert cfg.schedule.T_FIM == 10
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"schedule.nope": 1})


def test_env_output_override(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert parse_config(write_config(tmp_path, small_experiment())).output_dir == str(tmp_path / "elsewhere")


def test_fraction_levels():
    assert ExperimentConfig().profile.levels == (6, 9, 12)


def test_to_dict_is_plain_yaml():
    text = yaml.safe_dump(to_dict(ExperimentConfig()))
    assert "!!python" not in text


# --- CSV -------------------------------------------------------------------

def test_zero_records_header_only(tmp_path):
    path = emit_csv([], tmp_path / "r.csv")
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_csv_lines_and_round_trip(tmp_path):
    res = run_experiment(small_experiment(**{"federation.T": 2}))
    path = emit_csv(res.records[:1], tmp_path / "one.csv")
    assert len(path.read_text().splitlines()) == 2
    path = emit_csv(res.records, tmp_path / "two.csv")
    rows = read_csv(path)
    for rec, row in zip(res.records, rows):
        assert row["round"] == rec.round and row["selected"] == rec.selected
        assert row["maps"] == ["".join(str(b) for b in rec.maps[i]) for i in rec.selected]
        for key, want in (("accuracy", rec.accuracy), ("loss", rec.loss), ("train_loss", rec.train_loss),
                          ("head_delta_norm", rec.head_delta_norm), ("comm_ours", rec.costs["comm_ours"])):
            assert row[key] == pytest.approx(want, rel=5e-6)
        np.testing.assert_allclose(row["delta_norms"], rec.delta_norms, rtol=5e-6)
        np.testing.assert_allclose(row["layer_probs"], rec.layer_probs, atol=5e-7)


def test_excluded_maps_marked(tmp_path):
    cfg = small_experiment(**{"schedule.strategy": "Exclusive", "federation.T": 1})
    res = run_experiment(cfg)
    rows = read_csv(emit_csv(res.records, tmp_path / "e.csv"))
    caps = res.simulation.capabilities
    for i, m in zip(rows[0]["selected"], rows[0]["maps"]):
        assert m == ("1111" if caps[i] == 4 else "X")


def test_parse_strategy():
    assert parse_strategy("GD:Bottleneck") == ("GD", "Bottleneck")
    assert parse_strategy("GD-Triangle") == ("GD", "Triangle")
    assert parse_strategy("Random") == ("Random", None)
    with pytest.raises(ValueError):
        parse_strategy("GD:Pyramid")


# --- grid ------------------------------------------------------------------

def test_single_cell_grid(tmp_path):
    res = run_grid(small_experiment(**{"federation.T": 1}), ["Random"], [0], root=tmp_path)
    assert res.ok
    dirs = [p for p in tmp_path.iterdir() if p.is_dir()]
    assert [d.name for d in dirs] == ["Random_0"]


def test_grid_counts_and_determinism(tmp_path):
    cfg = small_experiment(**{"federation.T": 2})
    res = run_grid(cfg, ["CoDesign", "GD:Bottleneck"], [0, 1, 2], root=tmp_path / "a")
    assert res.ok
    csvs = sorted((tmp_path / "a").glob("*/rounds.csv"))
    assert len(csvs) == 6
    summary = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert len(summary) == 3 and summary[0] == "strategy,n_ok,n_failed,acc_mean,acc_std"
    run_grid(cfg, ["CoDesign", "GD:Bottleneck"], [0, 1, 2], root=tmp_path / "b")
    for path in csvs:
        other = tmp_path / "b" / path.parent.name / "rounds.csv"
        assert path.read_bytes() == other.read_bytes()


def test_grid_records_failures(tmp_path):
    res = run_grid(small_experiment(**{"federation.T": 1}), ["Random", "Bogus"], [0], root=tmp_path)
    assert not res.ok
    assert res.failures[0][0] == "Bogus"
    assert (tmp_path / "Random_0" / "rounds.csv").exists()
    assert "Bogus" in (tmp_path / "failures.txt").read_text()


def test_checkpoints_written(tmp_path):
    cfg = small_experiment(**{"federation.T": 2, "federation.checkpoint_every": 1})
    run_grid(cfg, ["CoDesign"], [0], root=tmp_path)
    assert (tmp_path / "CoDesign_0" / "theta_round1.ckpt").exists()
    assert load_checkpoint(tmp_path / "CoDesign_0" / "theta_round2.ckpt").n_layers == 4


# --- checkpoint ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    _, params = init_model(tiny_config(l=3, r=2), RngStream(0))
    randomize_adapters(params)
    save_checkpoint(params, tmp_path / "p.ckpt")
    back = load_checkpoint(tmp_path / "p.ckpt")
    for (na, a), (nb, b) in zip(params.named_tensors(), back.named_tensors()):
        assert na == nb and np.array_equal(a, b)
    raw = (tmp_path / "p.ckpt").read_bytes()
    assert raw[:8] == b"FLSCKPT1"


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "x.ckpt")


# --- costs and CLI ---------------------------------------------------------

def test_cost_report_half_capability():
    cfg = ExperimentConfig()
    rep = cost_report(cfg, c_bar=cfg.model.l / 2)
    assert rep["backward_ratio"] == 0.5
    assert rep["comm_ratio"] == pytest.approx(0.5 + rep["comm_map_term"] / rep["comm_full"], abs=1e-12)


def test_cli_validate(tmp_path, capsys):
    path = write_config(tmp_path, small_experiment())
    assert main(["validate", str(path)]) == 0
    assert "OK" in capsys.readouterr().out


def test_cli_validate_errors(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("federation:\n  T: -1\n")
    assert main(["validate", str(path)]) == 2
    assert "federation.T" in capsys.readouterr().err


def test_cli_costs_json(tmp_path, capsys):
    path = write_config(tmp_path, small_experiment())
    assert main(["costs", str(path), "--c-bar", "2", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["backward_ratio"] == 0.5


def test_cli_simulate_with_overrides(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "out"))
    path = write_config(tmp_path, small_experiment())
    assert main(["simulate", str(path), "federation.T=1", "--schedule.strategy", "Random"]) == 0
    rows = read_csv(tmp_path / "out" / "Random_0" / "rounds.csv")
    assert len(rows) == 1
    assert "final accuracy" in capsys.readouterr().out


def test_cli_gridrun(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "out"))
    path = write_config(tmp_path, small_experiment(**{"federation.T": 1}))
    assert main(["gridrun", str(path), "--strategies", "Random", "Straggler", "--seeds", "0", "1"]) == 0
    assert len(list((tmp_path / "out").glob("*/rounds.csv"))) == 4
    assert main(["gridrun", str(path), "--strategies", "Nope", "--seeds", "0"]) == 1


def test_cli_override_before_grid_flags(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "out"))
    path = write_config(tmp_path, small_experiment())
    assert main(["gridrun", str(path), "--federation.T", "1", "--strategies", "Random", "--seeds", "3"]) == 0
    assert len(read_csv(tmp_path / "out" / "Random_3" / "rounds.csv")) == 1
