import json
import subprocess
import sys

import pytest

from tcseizure.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """synth -> preprocess -> train-base -> retrain -> calibrate, once per module."""
    d = tmp_path_factory.mktemp("cli")
    data, prep, models = d / "data", d / "prep", d / "models"
    assert main(["synth", "--patients", "3", "--minutes", "6", "--seed", "5", "--out", str(data)]) == 0
    assert main(["preprocess", "--data-dir", str(data), "--annotations", str(data / "annotations.csv"),
                 "--out", str(prep), "--seed", "1"]) == 0
    assert main(["train-base", "--dev", str(prep), "--out", str(d / "base.ckpt"), "--epochs", "2",
                 "--qat-bits", "4", "--seed", "0"]) == 0
    patients = json.loads((prep / "manifest.json").read_text())["patients"]
    for pid in sorted(patients):
        assert main(["retrain", "--base", str(d / "base.ckpt"), "--patient", pid, "--dev", str(prep),
                     "--out", str(models / f"{pid}.ckpt"), "--epochs-retrain", "1",
                     "--qat-bits", "4"]) == 0
    assert main(["calibrate", "--data", str(prep), "--models", str(models),
                 "--out", str(d / "smoothing.json")]) == 0
    return d, sorted(patients)


def test_synth_output(flow):
    d, patients = flow
    assert patients == ["P01", "P02", "P03"]
    assert (d / "data" / "annotations.csv").is_file()


def test_eval_prints_table_and_writes_json(flow, capsys):
    d, _ = flow
    code, out, _ = run(capsys, "eval", "--data", str(d / "prep"), "--models", str(d / "models"),
                       "--smoothing", str(d / "smoothing.json"), "--out", str(d / "eval.json"),
                       "--csv", str(d / "eval.csv"), "--boxplot-csv", str(d / "box.csv"))
    assert code == 0
    assert "Accuracy [%]" in out and "AUC score" in out
    rep = json.loads((d / "eval.json").read_text())
    for m in ("sma", "ewma", "hmm"):
        assert {"accuracy", "sensitivity", "specificity", "fpr", "auc"} <= set(rep["methods"][m])
    calib = json.loads((d / "smoothing.json").read_text())["calib_patients"]
    assert not set(calib) & set(rep["per_patient"])


def test_eval_refuses_calibration_patients(flow, capsys):
    d, _ = flow
    calib = json.loads((d / "smoothing.json").read_text())["calib_patients"]
    code, _, err = run(capsys, "eval", "--data", str(d / "prep"), "--models", str(d / "models"),
                       "--smoothing", str(d / "smoothing.json"), "--patients", calib[0])
    assert code == 1 and err.startswith("error: ValueError:")


def test_lut_stream_equivalence(flow, capsys):
    d, patients = flow
    pid = patients[0]
    hmm = d / "models" / f"{pid}.hmm.json"
    assert run(capsys, "lut", "--hmm", str(hmm), "--out", str(d / "lut.json"))[0] == 0
    assert len(json.loads((d / "lut.json").read_text())["entries"]) == 32
    edf = next((d / "data" / pid).glob("*.edf"))
    common = ["stream", "--edf", str(edf), "--model", str(d / "models" / f"{pid}.ckpt"),
              "--data", str(d / "prep"), "--smoothing", str(d / "smoothing.json")]
    c1, direct, _ = run(capsys, *common, "--hmm", str(hmm))
    c2, via_lut, _ = run(capsys, *common, "--lut", str(d / "lut.json"), "--use-lut")
    assert c1 == c2 == 0 and direct == via_lut
    lines = direct.splitlines()
    assert len(lines) == 240
    import re
    assert all(re.fullmatch(r"t=\d+\.\d p=\d\.\d{4} raw=[01] smoothed=[01]", x) for x in lines)
    assert lines[1].startswith("t=0.5 ")
    code, sma_out, _ = run(capsys, *common, "--hmm", str(hmm), "--method", "sma")
    assert code == 0 and len(sma_out.splitlines()) == 240


def test_cost(capsys, tmp_path):
    code, out, _ = run(capsys, "cost")
    d = json.loads(out)
    assert code == 0 and d["total_params"] == 9840 and d["cycles"] == 21123
    assert d["average_power_w"] == pytest.approx(495e-9, rel=1e-9)
    assert d["energy_per_mac_calibrated"] is True
    code, out, _ = run(capsys, "cost", "--energy-per-mac", "0", "--rate", "0")
    assert json.loads(out)["average_power_w"] == pytest.approx(100e-9)


def test_ingest_summaries(flow, capsys, tmp_path):
    d, _ = flow
    (tmp_path / "x-summary.txt").write_text(
        "File Name: P01_01.edf\nSeizure Start Time: 10 seconds\nSeizure End Time: 40 seconds\n")
    code, out, _ = run(capsys, "ingest", "--data-dir", str(d / "data"), "--summaries",
                       str(tmp_path / "*-summary.txt"), "--csv-out", str(tmp_path / "a.csv"))
    assert code == 0
    assert (tmp_path / "a.csv").read_text().splitlines()[-1] == "P01_01,10,40"
    inv = json.loads(out)
    assert inv["patients"]["P01"][0]["seizures"] == [[10.0, 40.0]]


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["cost", "--bogus"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_is_one_line(capsys, tmp_path):
    code, _, err = run(capsys, "lut", "--hmm", str(tmp_path / "missing.json"))
    assert code == 1
    assert err.count("\n") == 1 and err.startswith("error: FileNotFoundError:")


def test_idempotent_outputs(flow, capsys, tmp_path):
    d, _ = flow
    hmm = next((d / "models").glob("*.hmm.json"))
    run(capsys, "lut", "--hmm", str(hmm), "--out", str(tmp_path / "a.json"))
    run(capsys, "lut", "--hmm", str(hmm), "--out", str(tmp_path / "b.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "tcseizure", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
