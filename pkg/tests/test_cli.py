"""End-to-end tests for the command line interface.

Everything runs in-process through ``cli.main`` against a shared workspace
built once per module: one simulated S4 cohort, one small fit, and the
downstream artifacts.
"""

import json
import shutil

import pytest
import yaml

from jointsurv import cli
from jointsurv.cli import main

SMALL_MCMC = {"n_chains": 2, "burn_in": 150, "estimation": 300, "seed": 3}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with simulate -> fit -> extrapolate/km artifacts."""
    root = tmp_path_factory.mktemp("cli")
    sim = root / "sim"
    assert main(["simulate", "--scenario", "S4", "--seed", "7",
                 "--out", str(sim)]) == 0

    config = root / "fit.yaml"
    config.write_text(yaml.safe_dump({"mcmc": SMALL_MCMC}))
    fit = root / "fit"
    assert main(["fit", "--config", str(config),
                 "--longitudinal", str(sim / "longitudinal.csv"),
                 "--survival", str(sim / "survival.csv"),
                 "--out", str(fit)]) == 0

    extrap = root / "extrap"
    assert main(["extrapolate", "--fit", str(fit), "--seed", "1",
                 "--out", str(extrap)]) == 0

    km = root / "km"
    assert main(["km", "--survival", str(sim / "survival.csv"),
                 "--out", str(km)]) == 0
    return root


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class TestSimulate:
    def test_artifacts(self, ws):
        sim = ws / "sim"
        for name in ("longitudinal.csv", "survival.csv", "truth.json", "manifest.json"):
            assert (sim / name).exists(), name
        truth = read_json(sim / "truth.json")
        assert truth["group_counts"] == {"soft tissue sarcoma": 3, "other": 2}
        manifest = read_json(sim / "manifest.json")
        assert manifest["command"] == "simulate"
        assert truth["manifest_hash"] == manifest["manifest_hash"]

    def test_deterministic(self, ws, tmp_path):
        again = tmp_path / "sim2"
        assert main(["simulate", "--scenario", "S4", "--seed", "7",
                     "--out", str(again)]) == 0
        for name in ("longitudinal.csv", "survival.csv"):
            assert (again / name).read_bytes() == (ws / "sim" / name).read_bytes()

    def test_unknown_scenario(self, tmp_path, capsys):
        rc = main(["simulate", "--scenario", "S9", "--out", str(tmp_path / "x")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["exit_code"] == 2
        assert "S9" in err["message"]


class TestFit:
    def test_artifacts(self, ws):
        fit = ws / "fit"
        for name in ("posterior.csv", "diagnostics.json", "manifest.json"):
            assert (fit / name).exists(), name

    def test_manifest_hash_threads_through(self, ws):
        fit = ws / "fit"
        manifest = read_json(fit / "manifest.json")
        diagnostics = read_json(fit / "diagnostics.json")
        with open(fit / "posterior.csv", encoding="utf-8") as fh:
            first = fh.readline().strip()
        assert first == f"# manifest_hash={manifest['manifest_hash']}"
        assert diagnostics["manifest_hash"] == manifest["manifest_hash"]
        assert diagnostics["data_hash"] == manifest["data_hash"]

    def test_manifest_contents(self, ws):
        manifest = read_json(ws / "fit" / "manifest.json")
        assert manifest["command"] == "fit"
        assert manifest["config"]["mcmc"]["burn_in"] == 150
        assert manifest["seeds"] == [3, 4]
        assert "created" in manifest

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        config = ws / "fit.yaml"
        sim = ws / "sim"
        again = tmp_path / "fitB"
        assert main(["fit", "--config", str(config),
                     "--longitudinal", str(sim / "longitudinal.csv"),
                     "--survival", str(sim / "survival.csv"),
                     "--out", str(again)]) == 0
        assert (again / "posterior.csv").read_bytes() == \
            (ws / "fit" / "posterior.csv").read_bytes()
        assert (again / "diagnostics.json").read_bytes() == \
            (ws / "fit" / "diagnostics.json").read_bytes()

    def test_seed_flag_changes_draws(self, ws, tmp_path):
        sim = ws / "sim"
        other = tmp_path / "fit9"
        assert main(["fit", "--config", str(ws / "fit.yaml"), "--seed", "9",
                     "--longitudinal", str(sim / "longitudinal.csv"),
                     "--survival", str(sim / "survival.csv"),
                     "--out", str(other)]) == 0
        assert read_json(other / "manifest.json")["seeds"] == [9, 10]
        assert (other / "posterior.csv").read_bytes() != \
            (ws / "fit" / "posterior.csv").read_bytes()

    def test_missing_data_file(self, tmp_path, capsys):
        rc = main(["fit", "--longitudinal", str(tmp_path / "nope.csv"),
                   "--survival", str(tmp_path / "nope2.csv"),
                   "--out", str(tmp_path / "f")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert "nope" in err["message"]

    def test_unknown_config_section(self, ws, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"mcmcs": {"seed": 1}}))
        rc = main(["fit", "--config", str(bad),
                   "--longitudinal", str(ws / "sim" / "longitudinal.csv"),
                   "--survival", str(ws / "sim" / "survival.csv"),
                   "--out", str(tmp_path / "f")])
        assert rc == 2
        assert "mcmcs" in json.loads(capsys.readouterr().err)["message"]


class TestDiagnose:
    def test_matches_fit_diagnostics(self, ws, capsys):
        assert main(["diagnose", "--fit", str(ws / "fit")]) == 0
        printed = json.loads(capsys.readouterr().out)
        stored = read_json(ws / "fit" / "diagnostics.json")
        assert printed["dic"] == stored["dic"]
        assert printed["rhat"] == stored["rhat"]

    def test_writes_file_with_out(self, ws, tmp_path):
        out = tmp_path / "diag"
        assert main(["diagnose", "--fit", str(ws / "fit"), "--out", str(out)]) == 0
        doc = read_json(out / "diagnostics.json")
        assert doc["manifest_hash"] == read_json(ws / "fit" / "manifest.json")["manifest_hash"]

    def test_tampered_data_rejected(self, ws, tmp_path, capsys):
        surv = tmp_path / "survival.csv"
        text = (ws / "sim" / "survival.csv").read_text()
        surv.write_text(text.replace("soft tissue sarcoma", "bone", 1))
        rc = main(["diagnose", "--fit", str(ws / "fit"),
                   "--longitudinal", str(ws / "sim" / "longitudinal.csv"),
                   "--survival", str(surv)])
        assert rc == 2
        assert "match" in json.loads(capsys.readouterr().err)["message"]


class TestExtrapolate:
    def test_artifacts(self, ws):
        extrap = ws / "extrap"
        for name in ("joint_summary.json", "joint_curves.csv",
                     "weibull_summary.json", "weibull_curves.csv", "manifest.json"):
            assert (extrap / name).exists(), name

    def test_summary_shape(self, ws):
        doc = read_json(ws / "extrap" / "joint_summary.json")
        assert doc["method"] == "joint_posterior"
        scopes = doc["scopes"]
        assert "overall" in scopes
        overall = scopes["overall"]
        assert overall["n_patients"] == 5
        assert overall["rmst_lifespan"]["units"] == "years"
        assert overall["median"]["units"] == "months"
        weib = read_json(ws / "extrap" / "weibull_summary.json")
        assert weib["method"] == "weibull_mle"
        assert set(weib["scopes"]) == set(scopes)

    def test_manifest_references_fit(self, ws):
        manifest = read_json(ws / "extrap" / "manifest.json")
        fit_manifest = read_json(ws / "fit" / "manifest.json")
        assert manifest["command"] == "extrapolate"
        assert manifest["config"]["fit_manifest"] == fit_manifest["manifest_hash"]
        assert manifest["data_hash"] == fit_manifest["data_hash"]

    def test_curves_csv_grid(self, ws):
        lines = (ws / "extrap" / "joint_curves.csv").read_text().splitlines()
        assert lines[1] == "scope,time_months,mean,lo95,hi95"
        doc = read_json(ws / "extrap" / "joint_summary.json")
        n_scopes = len(doc["scopes"])
        assert len(lines) == 2 + n_scopes * 481

    def test_too_few_draws(self, ws, tmp_path, capsys):
        config = tmp_path / "tiny.yaml"
        config.write_text(yaml.safe_dump({
            "mcmc": {"n_chains": 1, "burn_in": 60, "estimation": 12, "seed": 3},
        }))
        tiny = tmp_path / "tinyfit"
        sim = ws / "sim"
        assert main(["fit", "--config", str(config),
                     "--longitudinal", str(sim / "longitudinal.csv"),
                     "--survival", str(sim / "survival.csv"),
                     "--out", str(tiny)]) == 0
        capsys.readouterr()
        rc = main(["extrapolate", "--fit", str(tiny), "--out", str(tmp_path / "e")])
        assert rc == 3
        err = json.loads(capsys.readouterr().err)
        assert err["exit_code"] == 3
        assert "40" in err["message"]


class TestKm:
    def test_artifacts(self, ws):
        km = ws / "km"
        assert (km / "km_curve.csv").exists()
        doc = read_json(km / "km_summary.json")
        assert doc["n_patients"] == 5
        assert "60" in doc["rmst"]
        entry = doc["rmst"]["60"]
        assert entry["units"] == "months"
        assert 0.0 < entry["point"] <= 60.0

    def test_horizons_flag(self, ws, tmp_path):
        out = tmp_path / "km2"
        assert main(["km", "--survival", str(ws / "sim" / "survival.csv"),
                     "--horizons", "12", "24", "--out", str(out)]) == 0
        doc = read_json(out / "km_summary.json")
        assert set(doc["rmst"]) == {"12", "24"}


class TestCompare:
    def test_ranks_by_dic(self, ws, tmp_path, capsys):
        # second model: independent association on the same cohort
        config = tmp_path / "indep.yaml"
        config.write_text(yaml.safe_dump({
            "mcmc": SMALL_MCMC, "model": {"association": "independent"},
        }))
        sim = ws / "sim"
        fit2 = tmp_path / "fit_indep"
        assert main(["fit", "--config", str(config),
                     "--longitudinal", str(sim / "longitudinal.csv"),
                     "--survival", str(sim / "survival.csv"),
                     "--out", str(fit2)]) == 0
        capsys.readouterr()
        out = tmp_path / "compare.json"
        rc = main(["compare", str(ws / "fit" / "diagnostics.json"),
                   str(fit2 / "diagnostics.json"), "--out", str(out)])
        assert rc == 0
        table = capsys.readouterr().out
        assert "best fit (lowest DIC)" in table
        doc = read_json(out)
        assert len(doc["models"]) == 2
        best_row = min(doc["models"], key=lambda m: m["dic"])
        assert doc["best"] == [best_row["association"]]
        assert best_row["best"] is True
        assert doc["tie"] is False

    def test_tie_marked(self, ws, tmp_path, capsys):
        copy = tmp_path / "copy.json"
        shutil.copy(ws / "fit" / "diagnostics.json", copy)
        rc = main(["compare", str(ws / "fit" / "diagnostics.json"), str(copy)])
        assert rc == 0
        assert "tied" in capsys.readouterr().out

    def test_single_input_rejected(self, ws, capsys):
        rc = main(["compare", str(ws / "fit" / "diagnostics.json")])
        assert rc == 2
        assert "at least 2" in json.loads(capsys.readouterr().err)["message"]

    def test_cohort_mismatch_rejected(self, ws, tmp_path, capsys):
        other = read_json(ws / "fit" / "diagnostics.json")
        other["data_hash"] = "0" * 64
        path = tmp_path / "other.json"
        path.write_text(json.dumps(other))
        rc = main(["compare", str(ws / "fit" / "diagnostics.json"), str(path)])
        assert rc == 2
        assert "cohort" in json.loads(capsys.readouterr().err)["message"]

    def test_non_diagnostics_input(self, ws, capsys):
        rc = main(["compare", str(ws / "fit" / "manifest.json"),
                   str(ws / "fit" / "diagnostics.json")])
        assert rc == 2
        assert "diagnostics" in json.loads(capsys.readouterr().err)["message"]


class TestErrorChannel:
    def test_error_json_shape(self, tmp_path, capsys):
        rc = main(["km", "--survival", str(tmp_path / "missing.csv"),
                   "--out", str(tmp_path / "k")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert set(err) == {"schema_version", "error", "message", "exit_code"}
        assert err["schema_version"] == cli.SCHEMA_VERSION

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "jointsurv" in capsys.readouterr().out
