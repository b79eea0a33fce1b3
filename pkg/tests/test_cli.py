import asyncio
import json
from pathlib import Path

import httpx
import numpy as np
import pytest
import yaml

from jlcm.cli import main, write_outputs
from jlcm.data import ingest_dataset
from jlcm.estimation import FitResult, fit_model
from jlcm.model import ModelSpec
from jlcm.service import app
from jlcm.workflows import read_covariates

from test_montecarlo import tiny_scenario


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenario.yaml").write_text(yaml.safe_dump(tiny_scenario(N=60).to_dict()))
    assert main(["simulate", "--scenario", str(root / "scenario.yaml"), "--seed", "4", "--out", str(root / "data")]) == 0
    cfg = {"model": "data/model.json",
           "data": {"longitudinal": "data/longitudinal.csv", "survival": "data/survival.csv",
                    "covariates": "data/covariates.csv"},
           "G": 2, "n_starts": 2, "seed": 5, "out": "out",
           "predict": {"grid": {"start": 0, "stop": 6, "points": 7}, "n_draws": 20},
           "gof": {"n_boot": 20}}
    (root / "config.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["fit", "--config", str(root / "config.yaml")]) == 0
    return root


def _write_config(root: Path, name: str, **changes) -> str:
    cfg = yaml.safe_load((root / "config.yaml").read_text())
    cfg.update(changes)
    (root / name).write_text(yaml.safe_dump(cfg))
    return str(root / name)


def test_simulate_writes_tables(work):
    names = sorted(p.name for p in (work / "data").iterdir())
    assert names == ["classes.csv", "covariates.csv", "longitudinal.csv", "model.json", "survival.csv"]


def test_simulate_is_byte_identical_for_a_seed(work, tmp_path):
    assert main(["simulate", "--scenario", str(work / "scenario.yaml"), "--seed", "4", "--out", str(tmp_path)]) == 0
    for p in (work / "data").iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_fit_outputs(work):
    out = work / "out"
    for name in ("fit.json", "estimates.csv", "convergence.log", "classification.csv", "criteria.csv"):
        assert (out / name).exists(), name
    fit = FitResult.from_json((out / "fit.json").read_text())
    assert fit.converged and fit.G == 2
    assert (out / "criteria.csv").read_text().splitlines()[0] == "G,loglik,p,AIC,BIC,entropy,ICL"
    assert not list(out.glob("*.tmp"))


def test_single_start_matches_library(work, tmp_path):
    assert main(["fit", "--config", str(work / "config.yaml"), "--starts", "1", "--seed", "12",
                 "--out", str(tmp_path)]) == 0
    cli_fit = FitResult.from_json((tmp_path / "fit.json").read_text())
    d = work / "data"
    ds = ingest_dataset(d / "longitudinal.csv", d / "survival.csv")
    ds = ds.with_covariates(read_covariates((d / "covariates.csv").read_text()))
    spec = ModelSpec.from_dict(json.loads((d / "model.json").read_text()))
    lib = fit_model(ds, spec, G=2, n_starts=1, seed=12)
    np.testing.assert_array_equal(cli_fit.theta, lib.theta)
    assert cli_fit.loglik == lib.loglik


def test_classify_predict_gof(work, tmp_path):
    cfg = _write_config(work, "c2.yaml", fit="out/fit.json")
    for cmd in ("classify", "predict", "gof"):
        assert main([cmd, "--config", cfg, "--out", str(tmp_path)]) == 0, cmd
    traj = (tmp_path / "trajectories.csv").read_text().splitlines()
    assert len(traj) == 1 + 2 * 7               # header + classes x grid points (one marker)
    ci = (tmp_path / "cumulative_incidence.csv").read_text().splitlines()
    assert len(ci) == 1 + 2 * 1 * 7
    assert (tmp_path / "class_table.csv").exists()
    assert (tmp_path / "gof_longitudinal.csv").exists() and (tmp_path / "gof_survival.csv").exists()


def test_external_cases(work, tmp_path):
    ids = [line.split(",")[0] for line in (work / "data/survival.csv").read_text().splitlines()[1:]]
    rng = np.random.default_rng(0)
    (work / "ext.csv").write_text("id,value,z\n" + "".join(f"{i},{rng.normal():.6f},{rng.normal():.6f}\n" for i in ids))
    cfg = _write_config(work, "c3.yaml", fit="out/fit.json",
                        external={"case": 1, "table": "ext.csv", "value": "value", "covariates": ["z"]})
    assert main(["external", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert "sigma" in (tmp_path / "external.csv").read_text()
    assert main(["external", "--config", cfg, "--case", "2", "--out", str(tmp_path)]) == 0
    assert "xi[class1].z" in (tmp_path / "external.csv").read_text()
    assert "uncertainty" in (tmp_path / "external.txt").read_text()


def test_select_single_class_has_blank_entropy(work, tmp_path):
    assert main(["select", "--config", str(work / "config.yaml"), "--G-range", "1", "1", "--out", str(tmp_path)]) == 0
    header, row = (tmp_path / "criteria.csv").read_text().splitlines()
    cells = dict(zip(header.split(","), row.split(",")))
    assert cells["G"] == "1" and cells["entropy"] == ""
    assert (tmp_path / "fit_G1.json").exists() and (tmp_path / "recommendation.txt").exists()


def test_non_convergence_exit_code(work, tmp_path):
    cfg = _write_config(work, "c4.yaml", optimizer={"max_iterations": 1})
    assert main(["fit", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert (tmp_path / "convergence.log").exists()


def test_config_errors_exit_1(work, tmp_path, capsys):
    assert main(["fit", "--config", str(tmp_path / "absent.yaml")]) == 1
    assert "absent.yaml" in capsys.readouterr().err
    cfg = _write_config(work, "c5.yaml", data={"longitudinal": "nowhere.csv", "survival": "data/survival.csv"})
    assert main(["fit", "--config", cfg]) == 1
    assert "nowhere.csv" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed")
    assert main(["fit", "--config", str(bad)]) == 1
    assert main(["fit", "--config", _write_config(work, "c6.yaml", model={"spec_version": 9})]) == 1
    assert main(["fit", "--config", str(work / "config.yaml"), "--jobs", "0"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["classify", "--config", str(work / "config.yaml")]) == 1


def test_data_error_exit_2(work, tmp_path, capsys):
    broken = tmp_path / "long.csv"
    broken.write_text((work / "data/longitudinal.csv").read_text() + "s01,1.5,y1,oops\n")
    cfg = _write_config(work, "c7.yaml", data={"longitudinal": str(broken), "survival": "data/survival.csv",
                                               "covariates": "data/covariates.csv"})
    assert main(["fit", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "oops" in capsys.readouterr().err


def test_atomic_writes_leave_no_partial_files(tmp_path):
    write_outputs(tmp_path, {"a.csv": "x\n1\n", "b.txt": "hello"})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.csv", "b.txt"]
    write_outputs(tmp_path, {"a.csv": "x\n2\n"})
    assert (tmp_path / "a.csv").read_text() == "x\n2\n"


def _post(path, payload):
    async def go():
        async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://t") as c:
            if payload is None:
                return await c.get(path)
            return await c.post(path, json=payload)
    return asyncio.run(go())


def test_service_error_kinds(work):
    assert _post("/v1/health", None).json()["status"] == "ok"
    d = work / "data"
    tables = {"longitudinal": (d / "longitudinal.csv").read_text(), "survival": (d / "survival.csv").read_text()}
    model = json.loads((d / "model.json").read_text())
    r = _post("/v1/fit", {"model": {"spec_version": 9}, "data": tables})
    assert r.status_code == 400 and r.json()["detail"]["kind"] == "config"
    r = _post("/v1/fit", {"model": model})
    assert r.status_code == 400 and "data" in r.json()["detail"]["message"]
    bad = dict(tables, survival=tables["survival"].replace(",0\n", ",9\n", 1))
    r = _post("/v1/fit", {"model": model, "data": bad, "n_starts": 1, "G": 1})
    assert r.status_code == 422 and r.json()["detail"]["kind"] == "data"


def test_mc_command(work, tmp_path):
    args = ["mc", "--scenario", str(work / "scenario.yaml"), "--replicates", "1", "--starts", "1",
            "--cache", str(tmp_path / "cache"), "--out", str(tmp_path)]
    assert main(args) == 0
    summary = json.loads((tmp_path / "mc_summary.json").read_text())
    assert summary["replicates"] == 1
    assert (tmp_path / "mc_parameters.csv").exists() and (tmp_path / "mc_replicates.csv").exists()
    assert len(list((tmp_path / "cache").rglob("rep_*.json"))) == 1
