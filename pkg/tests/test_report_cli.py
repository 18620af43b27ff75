import csv
import io
import json
from pathlib import Path

import pytest

from compenergy import cli
from compenergy.engine import MeasurementPlan
from compenergy.errors import ConfigError, EmitError
from compenergy.experiment import (
    ExperimentConfig,
    cell_grid,
    load_config,
    run_experiment,
    summarize,
)
from compenergy.model import ModelConfig
from compenergy.report import csv_views, emit, to_json

SMALL_TOML = """
[experiment]
lengths = [8, 16, 24]
precisions = ["fp16", "fp32"]
global_seed = 11

[model]
num_layers = 1
hidden_dim = 32
num_heads = 2
ffn_dim = 64
vocab_size = 64
max_seq_len = 32

[plan]
repetitions = 2000
model_repetitions = 500
trials = 6
"""


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(SMALL_TOML)
    return path


@pytest.fixture(scope="module")
def small_report(small_config):
    return run_experiment(load_config(small_config))


def test_config_loading(small_config):
    cfg = load_config(small_config)
    assert cfg.lengths == (8, 16, 24) and cfg.global_seed == 11
    assert cfg.model.num_layers == 1 and cfg.plan.trials == 6
    assert cfg.oracle.kappa["attention"]["fp16"] == 4000.0
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_shipped_config_equals_defaults():
    shipped = Path(__file__).resolve().parent.parent / "configs" / "default.toml"
    assert load_config(shipped) == ExperimentConfig()


def test_partial_oracle_override():
    cfg = ExperimentConfig.from_dict({"oracle": {"kappa": {"mlp": {"fp32": 1.0}},
                                                 "e0": {"lm_head": 2.5}}})
    assert cfg.oracle.kappa["mlp"] == {"fp16": 2500.0, "fp32": 1.0}
    assert cfg.oracle.e0["lm_head"] == 2.5 and cfg.oracle.e0["mlp"] == 8.0


@pytest.mark.parametrize("data", [
    {"experiment": {"lengths": []}},
    {"experiment": {"lengths": [8, 8]}},
    {"experiment": {"lengths": [200]}},
    {"experiment": {"precisions": []}},
    {"experiment": {"precisions": ["int8"]}},
    {"experiment": {"global_seed": -1}},
    {"model": {"hidden_dim": 6}},
    {"model": {"depth": 3}},
    {"oracle": {"kappa": {"conv": {"fp16": 1.0}}}},
    {"widgets": {}},
])
def test_config_errors(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_bad_toml(tmp_path):
    p = tmp_path / "x.toml"
    p.write_text("[model\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_grid_cardinality():
    cfg = ExperimentConfig()
    assert len(cell_grid(cfg)) == 10
    assert 10 * (4 * cfg.model.num_layers + 3 + 1) == 120


def test_report_has_one_record_per_cell(small_report):
    assert small_report["errors"] == []
    assert len(small_report["records"]) == 6 * (4 + 3 + 1)
    keys = {(r["precision"], r["length"], r["component"]) for r in small_report["records"]}
    assert len(keys) == len(small_report["records"])
    assert len(small_report["summary"]["captures"]) == 6
    assert len(small_report["summary"]["fits"]) == 2 * 8
    assert small_report["provenance"]["config"]["experiment"]["global_seed"] == 11


def test_summary_recomputes_from_json(small_report):
    parsed = json.loads(to_json(small_report))
    assert to_json(summarize(parsed["records"])) == to_json(small_report["summary"])


def test_json_reemit_is_identical(small_report):
    text = to_json(small_report)
    assert to_json(json.loads(text)) == text
    assert text.endswith("\n")


def test_nonfinite_floats_become_null():
    assert json.loads(to_json({"a": float("inf"), "b": [float("nan")]})) == {"a": None, "b": [None]}


def test_nine_significant_digits():
    assert to_json({"x": 1 / 3}) == '{\n  "x": 0.333333333\n}\n'


def test_empty_report(tmp_path):
    paths = emit({"records": [], "summary": {}}, tmp_path)
    assert json.loads((tmp_path / "report.json").read_text())["records"] == []
    for p in paths:
        if p.suffix == ".csv":
            assert len(p.read_text().splitlines()) == 1


GOLDEN_HEADERS = {
    "cells.csv": "precision,length,component,mean_mj,std_mj,rel_std_pct,total_flops,duration_s,"
                 "e_per_flop,truth_mj,repetitions,zero_reading_trials",
    "captures.csv": "precision,length,capture_mj,model_mj,pct_capture",
    "marginals.csv": "precision,component,length_lo,length_hi,marginal_e_per_flop",
    "fits.csv": "precision,component,e0_hat_mj,k_hat_mj_per_gflop,r_squared,negative_intercept",
}


def test_csv_headers_and_rows(small_report):
    views = csv_views(small_report)
    for name, header in GOLDEN_HEADERS.items():
        assert views[name].splitlines()[0] == header
    assert len(views["cells.csv"].splitlines()) == len(small_report["records"]) + 1
    series = list(csv.reader(io.StringIO(views["series_e_per_flop.csv"])))
    assert series[0][0] == "length" and "fp16/layer0.attention" in series[0]
    assert [int(r[0]) for r in series[1:]] == [8, 16, 24]
    marg = list(csv.reader(io.StringIO(views["series_marginal.csv"])))
    assert [int(r[0]) for r in marg[1:]] == [16, 24]


def test_emit_cleans_up_on_failure(tmp_path, small_report, monkeypatch):
    real_open = open
    calls = []

    def flaky(path, *a, **kw):
        calls.append(path)
        if len(calls) == 3:
            raise OSError("disk full")
        return real_open(path, *a, **kw)

    monkeypatch.setattr("builtins.open", flaky)
    with pytest.raises(EmitError):
        emit(small_report, tmp_path / "out")
    monkeypatch.undo()
    assert list((tmp_path / "out").iterdir()) == []


def test_emit_into_a_file_path_fails(tmp_path, small_report):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(EmitError):
        emit(small_report, blocker)


def test_failing_cells_are_isolated():
    cfg = ExperimentConfig(model=ModelConfig(num_layers=1, max_seq_len=128),
                           plan=MeasurementPlan(repetitions=2000, model_repetitions=200,
                                                trials=4, budget_seconds=3.4),
                           lengths=(8, 128), precisions=("fp32",))
    report = run_experiment(cfg)
    # the long sequence blows the measurement budget, the short one still runs
    assert [e["length"] for e in report["errors"]] == [128]
    assert report["errors"][0]["error"] == "BudgetError"
    assert {r["length"] for r in report["records"]} == {8}


def test_cli_run_is_reproducible(tmp_path, small_config, capsys):
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(small_config), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "report.json" in files and "cells.csv" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    # rerunning from the report's provenance gives the same bytes
    assert cli.main(["run", "--config", str(tmp_path / "a" / "report.json"),
                     "--out", str(tmp_path / "c")]) == 0
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()


def test_cli_seed_and_env_override(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(small_config), "--seed", "5", "--format", "json"]) == 0
    report = json.loads((tmp_path / "env" / "report.json").read_text())
    assert report["provenance"]["config"]["experiment"]["global_seed"] == 5
    assert not list((tmp_path / "env").glob("*.csv"))


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nlengths = [999]\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
    partial = tmp_path / "partial.toml"
    partial.write_text("[experiment]\nlengths = [8, 128]\nprecisions = ['fp32']\n"
                       "[model]\nnum_layers = 1\n"
                       "[plan]\nrepetitions = 2000\nmodel_repetitions = 200\ntrials = 4\n"
                       "budget_seconds = 3.4\n")
    assert cli.main(["run", "--config", str(partial), "--out", str(tmp_path / "p")]) == 1
    assert (tmp_path / "p" / "report.json").exists()


def test_cli_flops(capsys):
    assert cli.main(["flops", "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "precision,length,component,muladds,exps,divs,casts,total_flops"
    assert len(lines) == 1 + 2 * 5 * 11
    assert cli.main(["flops", "--format", "json"]) == 0
    assert len(json.loads(capsys.readouterr().out)["flops"]) == 110


def test_cli_simulate_sensor(capsys):
    assert cli.main(["simulate-sensor", "--energy", "1", "--duration", "0.0001",
                     "--repetitions", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["zero_reading_trials"] >= 18
    assert cli.main(["simulate-sensor", "--energy", "-1"]) == 2


def test_cli_fit(tmp_path, small_report, capsys):
    path = tmp_path / "r.json"
    path.write_text(to_json(small_report))
    assert cli.main(["fit", str(path)]) == 0
    assert json.loads(capsys.readouterr().out)["fits"] == json.loads(to_json(small_report))[
        "summary"]["fits"]
    assert cli.main(["fit", str(path), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith(GOLDEN_HEADERS["fits.csv"])
    assert cli.main(["fit", str(tmp_path / "nope.json")]) == 2
