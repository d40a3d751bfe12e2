import csv
import io
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from matched_secondary import __version__
from matched_secondary.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_OK, main
from matched_secondary.config import CONFIG_DIR_ENV, AnalysisConfig, DeriveRule, resolve_config_path
from matched_secondary.estimation import FitOptions, fit
from matched_secondary.exceptions import InvalidInputError
from matched_secondary.ingest import cross_classify, ingest_csv, read_dataset, write_dataset
from matched_secondary.simulation import SimConfig, generate_population, replicate_rng, sample_matched_cc

from conftest import desk_dataset

SMALL_SIM = ["--rate", "0.05", "--n-pop", "30000", "--n-cases", "60", "--n-controls", "60", "--seed", "7"]


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _config(tmp_path, **kw):
    values = {"input": "data.csv", "disease": "d", "outcome": "y", "covariates": ["x"], "matching": ["g"]}
    values.update(kw)
    path = tmp_path / "analysis.yaml"
    path.write_text(yaml.safe_dump(values), encoding="utf-8")
    return path


def _study_csv(tmp_path, n=240, seed=0):
    rng = np.random.default_rng(seed)
    age = rng.integers(20, 90, n)
    sex = rng.choice(["F", "M"], n)
    x = rng.normal(size=n)
    y = rng.binomial(1, 1 / (1 + np.exp(-(0.3 * x - 0.2))))
    d = rng.binomial(1, 1 / (1 + np.exp(-(0.5 * x + 0.8 * y - 0.5))))
    frame = pd.DataFrame({"age": age, "sex": sex, "x": x, "y": y, "d": d})
    frame.to_csv(tmp_path / "data.csv", index=False)
    return frame


class TestIngestion:
    def test_missing_outcome_row_is_dropped(self, tmp_path):
        _write(tmp_path / "data.csv", "d,y,x,g\n1,1,0.5,a\n0,,0.1,a\n0,0,-1.5,a\n1,0,2.0,a\n")
        cfg = AnalysisConfig(input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["x"],
                             matching=["g"], methods=["PM1"])
        data, report = ingest_csv(cfg.input, cfg)
        assert data.n == 3 and report.rows_read == 4 and report.rows_dropped == 1
        assert report.strata == [{"stratum": 1, "label": "g=a", "n": 3, "cases": 2, "controls": 1}]

    def test_na_token_counts_as_missing(self, tmp_path):
        _write(tmp_path / "data.csv", "d,y,x,g\n1,1,0.5,a\n0,NA,0.1,a\n0,0,NA,a\n1,0,2.0,a\n0,1,1.0,a\n")
        cfg = AnalysisConfig(input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["x"],
                             matching=["g"], methods=["PM1"])
        data, report = ingest_csv(cfg.input, cfg)
        assert report.rows_dropped == 2 and data.n == 3

    def test_two_binary_factors_give_four_strata_in_lexicographic_order(self):
        frame = pd.DataFrame({"sex": ["M", "F", "M", "F", "F"], "old": [1, 0, 0, 1, 0]})
        z, codes, labels = cross_classify(frame, ["sex", "old"])
        assert labels == ("sex=F|old=0", "sex=F|old=1", "sex=M|old=0", "sex=M|old=1")
        np.testing.assert_array_equal(z, [4, 1, 3, 2, 1])
        np.testing.assert_array_equal(codes, [[1, 1], [0, 0], [1, 0], [0, 1], [0, 0]])

    def test_derived_thresholds(self, tmp_path):
        frame = _study_csv(tmp_path)
        cfg = AnalysisConfig(
            input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["x"],
            matching=["age50", "sex"], derive=[{"name": "age50", "column": "age", "op": ">=", "value": 50}],
            methods=["PM1"],
        )
        data, report = ingest_csv(cfg.input, cfg)
        assert data.K == 4
        assert [s["label"] for s in report.strata] == [
            "age50=0.0|sex=F", "age50=0.0|sex=M", "age50=1.0|sex=F", "age50=1.0|sex=M",
        ]
        # counts agree with a direct pandas tally of the raw file
        raw = pd.read_csv(tmp_path / "data.csv")
        tally = raw.groupby([raw.age >= 50, raw.sex]).size().to_list()
        assert [s["n"] for s in report.strata] == tally
        assert sum(s["cases"] for s in report.strata) == int(frame.d.sum())

    def test_unknown_column_is_named(self, tmp_path):
        _study_csv(tmp_path)
        cfg = AnalysisConfig(input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["bmi"],
                             matching=["sex"], methods=["PM1"])
        with pytest.raises(InvalidInputError, match="bmi"):
            ingest_csv(cfg.input, cfg)

    def test_stratum_without_controls_is_listed(self, tmp_path):
        _write(tmp_path / "data.csv", "d,y,x,g\n1,1,0.5,a\n0,0,0.1,a\n1,0,-1.5,b\n1,1,2.0,b\n")
        cfg = AnalysisConfig(input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["x"],
                             matching=["g"], methods=["PM1"])
        with pytest.raises(InvalidInputError, match=r"2 \(g=b\)"):
            ingest_csv(cfg.input, cfg)

    def test_non_binary_disease(self, tmp_path):
        _write(tmp_path / "data.csv", "d,y,x,g\n2,1,0.5,a\n0,0,0.1,a\n")
        cfg = AnalysisConfig(input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["x"],
                             matching=["g"], methods=["PM1"])
        with pytest.raises(InvalidInputError, match="0/1"):
            ingest_csv(cfg.input, cfg)

    def test_rule_validation(self):
        with pytest.raises(InvalidInputError):
            DeriveRule("a", "b", ">", float("inf"))
        with pytest.raises(InvalidInputError):
            DeriveRule("a", "b", "~", 1)
        with pytest.raises(InvalidInputError):
            DeriveRule("a", "b", "in", 3)

    def test_config_requires_rates_for_pm2(self):
        with pytest.raises(InvalidInputError, match="rates"):
            AnalysisConfig(input="f.csv", disease="d", outcome="y", covariates=["x"], matching=["g"])

    def test_schema_errors_name_the_key(self):
        with pytest.raises(InvalidInputError, match="methods"):
            AnalysisConfig.from_dict({"input": "f", "disease": "d", "outcome": "y", "covariates": ["x"],
                                      "matching": ["g"], "methods": ["PM7"]})


class TestDatasetRoundTrip:
    def test_write_then_read_is_exact(self):
        data, _ = desk_dataset(0, n=80)
        buf = io.StringIO()
        write_dataset(data, buf)
        path = io.StringIO(buf.getvalue())
        back = read_dataset(path)
        np.testing.assert_array_equal(back.d, data.d)
        np.testing.assert_array_equal(back.z, data.z)
        np.testing.assert_array_equal(back.y, data.y)
        np.testing.assert_array_equal(back.x, data.x)

    def test_ingested_rows_round_trip(self, tmp_path):
        _study_csv(tmp_path)
        cfg = AnalysisConfig(input=str(tmp_path / "data.csv"), disease="d", outcome="y", covariates=["x"],
                             matching=["sex"], methods=["PM1"])
        data, _ = ingest_csv(cfg.input, cfg)
        buf = io.StringIO()
        write_dataset(data, buf)
        back = read_dataset(io.StringIO(buf.getvalue()))
        np.testing.assert_array_equal(back.x, data.x)
        np.testing.assert_array_equal(back.factors, data.factors)


def _run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestFitCommand:
    def test_all_eight_methods_emit_blocks(self, tmp_path, capsys):
        frame = _study_csv(tmp_path, n=400)
        rates = [0.3, 0.35]
        cfg = _config(tmp_path, matching=["sex"], rates=rates)
        code, out, _ = _run(["fit", "--config", str(cfg)], capsys)
        report = json.loads(out)
        assert [b["method"] for b in report["results"]] == [
            "conditional", "unadjusted", "adjusted1", "adjusted2", "adjusted3", "PM1", "PM2", "PM3",
        ]
        assert code in (EXIT_OK, EXIT_CONVERGENCE)
        assert code == (EXIT_OK if all(b["converged"] for b in report["results"]) else EXIT_CONVERGENCE)
        assert report["version"] == __version__
        assert report["config"]["rates"] == rates and report["config"]["methods"][0] == "conditional"
        pm3 = report["results"][-1]
        assert len(pm3["stratum_rates"]) == 2
        assert report["ingestion"]["rows_read"] == len(frame)

    def test_wrong_rate_count_names_k(self, tmp_path, capsys):
        _study_csv(tmp_path)
        cfg = _config(tmp_path, matching=["sex"], methods=["PM2"], rates=[0.1, 0.2, 0.3])
        code, _, err = _run(["fit", "--config", str(cfg)], capsys)
        assert code == EXIT_INPUT
        assert "expected 2 stratum disease rates" in err

    def test_missing_input_file(self, tmp_path, capsys):
        cfg = _config(tmp_path, methods=["PM1"])
        code, _, err = _run(["fit", "--config", str(cfg)], capsys)
        assert code == EXIT_INPUT and "not found" in err

    def test_text_report(self, tmp_path, capsys):
        _study_csv(tmp_path)
        cfg = _config(tmp_path, matching=["sex"], methods=["unadjusted", "PM1"], format="text")
        code, out, _ = _run(["fit", "--config", str(cfg)], capsys)
        assert out.startswith(f"matched-secondary {__version__}")
        assert out.count("== ") == 2

    def test_config_dir_from_environment(self, tmp_path, capsys, monkeypatch):
        _study_csv(tmp_path)
        _config(tmp_path, matching=["sex"], methods=["unadjusted"])
        monkeypatch.setenv(CONFIG_DIR_ENV, str(tmp_path))
        monkeypatch.chdir(tmp_path.parent)
        assert resolve_config_path("analysis.yaml") == tmp_path / "analysis.yaml"
        code, out, _ = _run(["fit", "--config", "analysis.yaml"], capsys)
        assert code == EXIT_OK and json.loads(out)["results"][0]["method"] == "unadjusted"

    def test_dumped_dataset_fit_matches_in_process(self, tmp_path, capsys):
        dump = tmp_path / "ds.csv"
        code, _, _ = _run(["simulate", *SMALL_SIM, "-R", "1", "--methods", "unadjusted", "-q",
                           "-o", str(tmp_path / "s.csv"), "--dump-dataset", str(dump)], capsys)
        assert code == EXIT_OK
        code, out, _ = _run(["fit", "--dataset", str(dump), "--methods", "PM1,adjusted2"], capsys)
        assert code == EXIT_OK
        blocks = {b["method"]: b for b in json.loads(out)["results"]}
        cfg = SimConfig(disease_rate=0.05, n_pop=30000, n_cases=60, n_controls=60, seed=7)
        data = sample_matched_cc(generate_population(cfg), 60, 60, replicate_rng(cfg, 0))
        ref = fit(data, FitOptions(variant="PM1"))
        got = {p["name"]: p["estimate"] for p in blocks["PM1"]["parameters"]}
        for name, value in zip(ref.param_names, ref.theta):
            assert got[name] == pytest.approx(value, abs=1e-10)


class TestSimulateCommand:
    def test_byte_identical_and_worker_independent(self, tmp_path, capsys):
        outs = []
        for i, workers in enumerate((1, 1, 2)):
            path = tmp_path / f"s{i}.csv"
            rec = tmp_path / f"r{i}.csv"
            code, _, _ = _run(["simulate", *SMALL_SIM, "-R", "3", "--methods", "unadjusted,PM1",
                               "--workers", str(workers), "-q", "-o", str(path), "--replicates-out", str(rec)], capsys)
            assert code == EXIT_OK
            outs.append((path.read_bytes(), rec.read_bytes()))
        assert outs[0] == outs[1] == outs[2]

    def test_summary_columns_and_single_replicate_na(self, tmp_path, capsys):
        path = tmp_path / "s.csv"
        _run(["simulate", *SMALL_SIM, "-R", "1", "--methods", "unadjusted", "-q", "-o", str(path)], capsys)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["method", "bias", "rb", "mean_se", "emp_sd", "mse_x100", "cp", "n_fail"]
        assert rows[1][0] == "unadjusted" and rows[1][4] == "NA"

    def test_report_has_version_and_config(self, tmp_path, capsys):
        path = tmp_path / "s.csv"
        _run(["simulate", *SMALL_SIM, "-R", "1", "--methods", "unadjusted", "-q", "-o", str(path)], capsys)
        report = json.loads((tmp_path / "s.csv.json").read_text())
        assert report["version"] == __version__
        assert report["config"]["n_pop"] == 30000 and report["config"]["seed"] == 7
        assert len(report["population_stratum_rates"]) == 2

    def test_yaml_settings_with_flag_override(self, tmp_path, capsys):
        settings = tmp_path / "sim.yaml"
        settings.write_text(yaml.safe_dump({"n_pop": 30000, "disease_rate": 0.05, "n_cases": 40, "n_controls": 40,
                                            "n_replicates": 2, "seed": 3}))
        path = tmp_path / "s.csv"
        code, _, _ = _run(["simulate", "--config", str(settings), "--seed", "4", "--methods", "unadjusted", "-q",
                           "-o", str(path)], capsys)
        assert code == EXIT_OK
        report = json.loads((tmp_path / "s.csv.json").read_text())
        assert report["config"]["seed"] == 4 and report["config"]["n_cases"] == 40

    def test_bad_settings_exit_one(self, tmp_path, capsys):
        settings = tmp_path / "sim.yaml"
        settings.write_text("n_pop: -5\n")
        code, _, err = _run(["simulate", "--config", str(settings)], capsys)
        assert code == EXIT_INPUT and "n_pop" in err

    def test_shortage_exit_one(self, tmp_path, capsys):
        code, _, err = _run(["simulate", "--rate", "0.01", "--n-pop", "2000", "-R", "1", "-q",
                             "-o", str(tmp_path / "s.csv")], capsys)
        assert code == EXIT_INPUT and "stratum" in err


class TestSummarizeCommand:
    def test_matches_simulate_summary(self, tmp_path, capsys):
        path, rec = tmp_path / "s.csv", tmp_path / "r.csv"
        _run(["simulate", *SMALL_SIM, "-R", "3", "--methods", "unadjusted,PM1", "-q", "-o", str(path),
              "--replicates-out", str(rec)], capsys)
        code, out, _ = _run(["summarize", str(rec)], capsys)
        assert code == EXIT_OK
        assert out == path.read_text()

    def test_empty_file(self, tmp_path, capsys):
        rec = tmp_path / "r.csv"
        rec.write_text("replicate,method,estimate,se,ci_low,ci_high,covers,converged,dataset_hash\n")
        code, _, err = _run(["summarize", str(rec)], capsys)
        assert code == EXIT_INPUT and "no replicate records" in err


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "matched_secondary.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
