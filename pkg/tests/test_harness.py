import csv
import json

import numpy as np
import pytest

from ifbench.cli import main
from ifbench.harness import run as run_mod
from ifbench.harness.config import ConfigError, ExperimentConfig, toy_preset
from ifbench.harness.report import render_report
from ifbench.harness.resources import RESOURCES_FILE, ResourceReport
from ifbench.harness.run import FAILURE_FILE, SUMMARY_FILE, RunFailed, reevaluate, run_experiment
from ifbench.training import FAMILIES


def small(name="smoke", **kw):
    return toy_preset("unet", name=name, epochs=3, steps_per_epoch=40,
                      data=dict(kind="toy", toy_seed=1, wells_per_group=1, sites_per_well=2), **kw)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    return run_experiment(small(), tmp_path_factory.mktemp("runs") / "smoke")


def test_artifacts(toy_run):
    for rel in ("config.json", "manifest.csv", "metrics.csv", "timings.json", SUMMARY_FILE, RESOURCES_FILE,
                "checkpoints/state.ckpt", "checkpoints/generator.ckpt", "quality/quality_report.json",
                "quality/quality_records.csv", "features/real.csv", "features/unet.csv",
                "analysis/correlation_channelwise.json", "analysis/correlation_overall.json"):
        assert (toy_run / rel).exists(), rel
    assert not (toy_run / FAILURE_FILE).exists()
    assert len(list((toy_run / "predictions").rglob("*.npy"))) > 0


def test_validation_improves(toy_run):
    s = json.loads((toy_run / SUMMARY_FILE).read_text())
    assert s["stages"] == list(run_mod.STAGES)
    assert len(s["training"]["val_rmse"]) == 3
    assert s["training"]["val_rmse"][-1] < s["training"]["val_rmse"][0]


def test_deterministic_rerun(toy_run, tmp_path):
    again = run_experiment(small(), tmp_path / "again")
    assert (again / SUMMARY_FILE).read_bytes() == (toy_run / SUMMARY_FILE).read_bytes()


def test_reevaluate_matches(toy_run):
    stored = json.loads((toy_run / "quality" / "quality_report.json").read_text())
    assert json.loads(json.dumps(reevaluate(toy_run).to_dict())) == stored


def test_failure_manifest(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(run_mod, "evaluate_model", boom)
    cfg = small("fails").replace(epochs=1, steps_per_epoch=2, profile=False, resources=False)
    with pytest.raises(RunFailed) as ei:
        run_experiment(cfg, tmp_path / "r")
    assert ei.value.stage == "evaluate"
    f = json.loads((tmp_path / "r" / FAILURE_FILE).read_text())
    assert f["stage"] == "evaluate" and f["completed"] == ["data", "train", "infer"]
    assert "disk on fire" in f["message"]
    assert (tmp_path / "r" / "checkpoints" / "state.ckpt").exists()
    assert not (tmp_path / "r" / SUMMARY_FILE).exists()


# ---- configuration


def test_invalid_family():
    with pytest.raises(ConfigError):
        ExperimentConfig(family="vae")
    with pytest.raises(ConfigError):
        toy_preset("vae")


def test_unknown_keys_and_conflicts(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"family": "unet", "learning_rate": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"family": "unet", "data": {"kind": "toy", "sites": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig(spec={"seed": 3}, seed=4)
    with pytest.raises(ConfigError):
        ExperimentConfig(data={"kind": "real"})
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(p)


def test_config_roundtrip(tmp_path):
    cfg = small()
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ExperimentConfig.from_json(p) == cfg


# ---- report


def fake_resources(tmp_path):
    runs = []
    for i, fam in enumerate(FAMILIES):
        d = tmp_path / fam
        d.mkdir()
        (d / "config.json").write_text(json.dumps({"family": fam}))
        r = ResourceReport(fam, 10.0 * (i + 1), 2, 50.0 * (i + 1), 10**8, None, 0.01 * 10**i, 10,
                           10**6, 0, 3 * 10**6)
        (d / RESOURCES_FILE).write_text(r.to_json())
        runs.append(d)
    return runs


def test_report_sections(toy_run, tmp_path):
    s = render_report([toy_run], tmp_path / "rep")
    for sec in ("metrics", "heatmap_channelwise", "heatmap_overall", "resources"):
        assert sec in s["sections"], sec
        name = s["sections"][sec]
        assert (tmp_path / "rep" / name).exists()
    assert any(n.startswith("crosseval") for n in s["notices"])
    assert (tmp_path / "rep" / "report_summary.json").exists()


def test_heatmap_values_match_matrix(toy_run, tmp_path):
    render_report([toy_run], tmp_path / "rep")
    cm = json.loads((toy_run / "analysis" / "correlation_channelwise.json").read_text())
    with open(tmp_path / "rep" / "heatmap_channelwise.csv") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[1:] == cm["methods"]
    picks = np.random.default_rng(0).choice(len(body), size=min(5, len(body)), replace=False)
    for i in picks:
        group, value = body[i][0], float(body[i][1])
        want = cm["values"][cm["groups"].index(group)][0]
        if want is None:
            assert np.isnan(value)
        else:
            assert value == want


def test_resource_table_five_rows(tmp_path):
    s = render_report(fake_resources(tmp_path), tmp_path / "rep")
    assert [r["model"] for r in s["resources"]] == list(FAMILIES)
    with open(tmp_path / "rep" / "resources.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5
    assert "metrics" not in s["sections"]


def test_report_needs_runs(tmp_path):
    with pytest.raises(ValueError):
        render_report([], tmp_path)


def test_resource_report_rejects_negative():
    with pytest.raises(ValueError):
        ResourceReport("unet", -1.0, 1, 1.0, 1, None, 0.1, 10, 1, 0, 1)


# ---- CLI


def test_cli_config_errors(tmp_path, capsys):
    assert main(["train", "--family", "vae", "--output-root", str(tmp_path)]) == 1
    assert main(["train"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["evaluate", "--pred-dir", "x", "--out", "y"]) == 1  # --manifest missing


def test_cli_runtime_error(toy_run, tmp_path):
    code = main(["evaluate", "--pred-dir", str(tmp_path / "nothing"), "--manifest", str(toy_run / "manifest.csv"),
                 "--out", str(tmp_path / "q"), "--target-size", "64"])
    assert code == 2


def test_cli_toygen_and_evaluate(toy_run, tmp_path, capsys):
    assert main(["toygen", "--out", str(tmp_path / "toy"), "--wells-per-group", "1"]) == 0
    assert (tmp_path / "toy" / "manifest.csv").exists()
    code = main(["evaluate", "--pred-dir", str(toy_run / "predictions"), "--manifest", str(toy_run / "manifest.csv"),
                 "--out", str(tmp_path / "q"), "--target-size", "64", "--model", "unet"])
    assert code == 0
    assert json.loads((tmp_path / "q" / "quality_report.json").read_text()) == \
        json.loads((toy_run / "quality" / "quality_report.json").read_text())


def test_cli_report(toy_run, tmp_path):
    assert main(["report", str(toy_run), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report_summary.json").exists()
