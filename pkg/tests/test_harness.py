import csv
import json
import os

import pytest

from stochtransport.errors import (ConfigurationError, ExperimentError, IntegrityError,
                                   SchemaError, UnknownExperimentError)
from stochtransport.harness.cli import main
from stochtransport.harness.config import (ExperimentConfig, config_from_dict, dump_config,
                                           load_config, load_schema, parse_config)
from stochtransport.harness.report import (emit_report, load_manifest, run_experiment,
                                           validate_csv)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")

WEAK = {"experiment": "weak_residual", "seed": 3, "drift": {"kind": "zero"}, "sigma": 1.0,
        "u0": {"kind": "gaussian-bump"}, "grid": {"d": 1, "half_width": 2.0, "points": 51},
        "dt": 0.02, "T": 0.5, "paths": 40, "options": {"levels": 2}}

SHOCK = {"experiment": "shock_demo", "seed": 1, "grid": {"d": 1, "half_width": 2.0,
                                                         "points": 101},
         "dt": 0.01, "T": 1.5, "paths": 20, "times": [0.0, 0.75, 1.5], "rs": [2.0],
         "options": {"refine_check": False}}


def test_shipped_configs_validate():
    names = sorted(f for f in os.listdir(CONFIGS) if f.endswith(".yaml"))
    assert len(names) >= 5
    seen = set()
    for name in names:
        cfg = load_config(os.path.join(CONFIGS, name))
        seen.add(cfg.experiment)
    assert seen == {"shock_demo", "mollify_convergence", "zvonkin_verify", "moment_bounds",
                    "weak_residual"}


def test_schema_is_published_in_docs():
    with open(os.path.join(ROOT, "docs", "config_schema.json")) as fh:
        assert json.load(fh) == load_schema()


def test_unknown_experiment_and_missing_seed():
    with pytest.raises(UnknownExperimentError):
        config_from_dict({"experiment": "frobnicate", "seed": 1})
    with pytest.raises(SchemaError, match="seed"):
        config_from_dict({"experiment": "shock_demo"})
    with pytest.raises(SchemaError):
        config_from_dict({"experiment": "shock_demo", "seed": 1, "paths": 0})
    with pytest.raises(SchemaError):
        config_from_dict({"experiment": "shock_demo", "seed": 1, "bogus": 2})
    with pytest.raises(SchemaError):
        config_from_dict({"experiment": "shock_demo", "seed": 1, "drift": {"kind": "nope"}})


def test_config_roundtrip_and_hash():
    cfg = config_from_dict(WEAK)
    assert parse_config(dump_config(cfg)) == cfg
    other = config_from_dict({**WEAK, "threads": 4, "output_dir": "elsewhere"})
    assert other.hash() == cfg.hash()
    assert config_from_dict({**WEAK, "seed": 4}).hash() != cfg.hash()


def test_run_is_deterministic_and_manifest_consistent(tmp_path):
    cfg = config_from_dict(WEAK)
    a = run_experiment(cfg, output_dir=str(tmp_path / "a"))
    b = run_experiment(cfg, output_dir=str(tmp_path / "b"))
    assert a.outputs == b.outputs and a.outputs
    assert load_manifest(str(tmp_path / "a")).outputs == a.outputs
    assert a.config_hash == cfg.hash()
    assert load_config(str(tmp_path / "a" / "config.yaml")).hash() == a.config_hash
    text = emit_report(a)
    assert "0 warnings" in text and "median_decreasing: PASS" in text
    assert os.path.isfile(tmp_path / "a" / "report.txt")


def test_report_surfaces_flags_verbatim(tmp_path):
    cfg = config_from_dict(WEAK)
    m = run_experiment(cfg, output_dir=str(tmp_path))
    m.warnings = ["level 4: only 12 unescaped paths in some cell (< 30); statistic unreliable"]
    text = emit_report(m, write=False)
    assert "1 warning" in text
    assert m.warnings[0] in text


def test_unreliable_statistics_reach_the_manifest(tmp_path):
    cfg = config_from_dict({"experiment": "moment_bounds", "seed": 1, "paths": 10, "T": 0.2,
                            "dt": 0.01, "mollify": [4, 8], "p_exp": [2.0],
                            "options": {"moment_points": 3}})
    m = run_experiment(cfg, output_dir=str(tmp_path))
    assert any("unreliable" in w for w in m.warnings)
    text = emit_report(m, write=False)
    for w in m.warnings:
        assert w in text
    assert m.verdicts["statistics_reliable"] is False


def test_verdict_section_lists_exactly_configured(tmp_path):
    cfg = config_from_dict({**WEAK, "verdicts": ["median_decreasing"]})
    m = run_experiment(cfg, output_dir=str(tmp_path))
    assert list(m.verdicts) == ["median_decreasing"]
    lines = emit_report(m, write=False).split("verdicts:\n")[1].split("\n\n")[0].splitlines()
    assert lines == ["  median_decreasing: PASS"]
    with pytest.raises(ConfigurationError):
        run_experiment(config_from_dict({**WEAK, "verdicts": ["nope"]}),
                       output_dir=str(tmp_path / "x"))


def test_integrity_errors(tmp_path):
    m = run_experiment(config_from_dict(WEAK), output_dir=str(tmp_path))
    path = tmp_path / "weak_residual.csv"
    path.write_text(path.read_text() + "tampered\n")
    with pytest.raises(IntegrityError, match="digest"):
        emit_report(m)
    path.unlink()
    with pytest.raises(IntegrityError, match="missing"):
        emit_report(m)


def test_stage_attribution(tmp_path):
    cfg = config_from_dict({"experiment": "mollify_convergence", "seed": 1, "mollify": [4],
                            "T": 0.1, "dt": 0.01, "paths": 5, "options": {"fd_step": 1e-20}})
    with pytest.raises(ExperimentError) as exc:
        run_experiment(cfg, output_dir=str(tmp_path / "out"))
    assert exc.value.stage == "moments"
    assert type(exc.value.cause).__name__ == "StepSizeError"
    assert not os.path.exists(tmp_path / "out")


def test_holder_series_column_contract(tmp_path):
    m = run_experiment(config_from_dict(SHOCK), output_dir=str(tmp_path))
    with open(tmp_path / "holder_series.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["sigma", "t", "alpha", "quantile", "value"]
    keys = {(r["sigma"], r["t"], r["alpha"], r["quantile"]) for r in rows}
    assert len(keys) == len(rows) == 2 * 3 * 2 * 2
    validate_csv(tmp_path / "holder_series.csv", [("sigma", "float"), ("t", "float"),
                                                  ("alpha", "float"), ("quantile", "float"),
                                                  ("value", "float")])
    assert set(m.verdicts) == {"deterministic_jump", "noisy_bounded", "holder_finite"}


def test_csv_validation_rejects_bad_cells(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1.0,true\n")
    validate_csv(p, [("a", "float"), ("b", "bool")])
    p.write_text("a,b\nx,true\n")
    with pytest.raises(SchemaError):
        validate_csv(p, [("a", "float"), ("b", "bool")])
    with pytest.raises(SchemaError):
        validate_csv(p, [("a", "float")])


def _write(tmp_path, data):
    path = tmp_path / "cfg.yaml"
    path.write_text(dump_config(ExperimentConfig(**data)) if "experiment" in data and
                    data["experiment"] != "frobnicate" else json.dumps(data))
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, {**WEAK, "output_dir": str(tmp_path / "run")})
    assert main(["validate", good]) == 0
    assert main(["catalog"]) == 0
    assert "coalescing" in capsys.readouterr().out
    assert main(["run", good, "--threads", "2"]) == 0
    assert os.path.isfile(tmp_path / "run" / "manifest.json")
    bad = tmp_path / "bad.yaml"
    bad.write_text(json.dumps({"experiment": "frobnicate", "seed": 1,
                               "output_dir": str(tmp_path / "never")}))
    assert main(["run", str(bad)]) == 2
    assert not os.path.exists(tmp_path / "never")


def test_cli_failing_verdict_exit_code(tmp_path):
    data = {**WEAK, "drift": {"kind": "constant", "c": 1.0}, "sigma": 0.0,
            "options": {"levels": 2, "min_order": 5.0}, "output_dir": str(tmp_path / "r")}
    assert main(["run", _write(tmp_path, data)]) == 1


@pytest.mark.parametrize("name", sorted(f for f in os.listdir(CONFIGS) if f.endswith(".yaml")))
def test_shipped_configs_pass_end_to_end(name, tmp_path):
    cfg = load_config(os.path.join(CONFIGS, name))
    m = run_experiment(cfg, output_dir=str(tmp_path))
    assert m.passed, m.verdicts
    emit_report(m)
