import json

import pytest

from caveloco.cli import EXIT_GATE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from caveloco.geometry import CaveLayout


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Calibration, a small dataset and a quickly trained model shared by the run tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["calibrate", "--sigma", "0.3", "--out", str(d / "calib")]) == EXIT_OK
    assert main(["dataset", "--samples", "40", "--out", str(d / "ds.txt.gz")]) == EXIT_OK
    assert main(["train", "--dataset", str(d / "ds.txt.gz"), "--epochs", "20", "--min-accuracy", "0",
                 "--out", str(d / "model.json")]) == EXIT_OK
    return d


def test_calibrate_writes_files_and_table(work, capsys):
    out = work / "calib2"
    assert main(["calibrate", "--sigma", "0.3", "--seed", "1", "--out", str(out)]) == EXIT_OK
    table = capsys.readouterr().out
    assert "rmse_px" in table and len(table.strip().splitlines()) == 5
    cams = json.loads((out / "calibration.json").read_text())["cameras"]
    assert len(cams) == 4 and all(c["rmse_px"] < 1.0 for c in cams)
    assert sorted(p.name for p in out.glob("camera*.txt")) == [f"camera{i}.txt" for i in range(4)]


def test_calibrate_from_files_and_gate(work, tmp_path):
    src = work / "calib"
    assert main(["calibrate", "--correspondences", str(src), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["calibrate", "--sigma", "3.0", "--gate-px", "1.0", "--out", str(tmp_path / "b")]) == EXIT_GATE


def test_calibrate_custom_layout(tmp_path):
    path = tmp_path / "layout.json"
    CaveLayout.default(side=3.0).save(path)
    assert main(["calibrate", "--layout", str(path), "--out", str(tmp_path / "c")]) == EXIT_OK


def test_usage_errors(tmp_path, capsys):
    assert main(["calibrate", "--layout", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err
    assert main(["nonsense"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["train", "--epochs", "many"]) == EXIT_USAGE
    assert main(["run", "--model", str(tmp_path / "none.json")]) == EXIT_USAGE


def test_train_is_deterministic(work, tmp_path, capsys):
    args = ["train", "--dataset", str(work / "ds.txt.gz"), "--epochs", "20", "--min-accuracy", "0"]
    assert main(args + ["--out", str(tmp_path / "m.json"), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "holdout accuracy" in printed and "StepRight" in printed
    assert (tmp_path / "m.json").read_bytes() == (work / "model.json").read_bytes()
    assert "confusion" in json.loads((tmp_path / "r.json").read_text())
    assert main(args + ["--out", str(tmp_path / "g.json"), "--min-accuracy", "1.01"]) == EXIT_GATE


def test_empty_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["dataset", "--samples", "0", "--out", str(tmp_path / "e.txt.gz")]) == EXIT_RUNTIME
    assert "DegenerateDataset" in capsys.readouterr().err


def test_garbage_model_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--model", str(bad), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME


def test_run_and_report(work, tmp_path, capsys):
    run = tmp_path / "run"
    rc = main(["run", "--model", str(work / "model.json"), "--calibration", str(work / "calib" / "calibration.json"),
               "--udp", "--port", "0", "--out", str(run)])
    assert rc == EXIT_OK
    for name in ("latency.json", "commands.txt", "trajectory.txt", "timeline.txt", "ids.txt", "run.json",
                 "calibration.json"):
        assert (run / name).is_file()
    capsys.readouterr()
    assert main(["report", str(run), "--json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep == json.loads((run / "report.json").read_text())
    assert rep["processed"] == rep["frames"] == 300
    assert rep["id_switches"]["total"] == 0
    assert rep["triangulation_rmse_m"] < 0.01
    assert set(rep["calibration_rmse_px"]) == {"0", "1", "2", "3"}
    assert (run / "report.txt").read_text().startswith("run:")


def test_run_rejects_unknown_stage(work, tmp_path):
    rc = main(["run", "--model", str(work / "model.json"), "--inject", "paint=5", "--out", str(tmp_path / "r")])
    assert rc == EXIT_USAGE


def test_report_on_empty_dir(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_RUNTIME


def test_config_file_supplies_defaults(work, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"calibrate": {"gate-px": 0.01, "sigma": 0.5}}))
    assert main(["--config", str(cfg), "calibrate", "--out", str(tmp_path / "a")]) == EXIT_GATE
    monkeypatch.setenv("CAVELOCO_CONFIG", str(cfg))
    assert main(["calibrate", "--out", str(tmp_path / "b")]) == EXIT_GATE
    # explicit flags still win
    assert main(["calibrate", "--gate-px", "5", "--out", str(tmp_path / "c")]) == EXIT_OK
