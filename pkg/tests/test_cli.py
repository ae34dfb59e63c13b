import json
import subprocess
import sys
from pathlib import Path

import pytest

from fbmle.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _json(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def path_csv(tmp_path, capsys):
    f = tmp_path / "p.csv"
    assert main(["simulate", "--hurst", "0.3", "--theta", "-1", "--n", "400", "--dt", "0.125",
                 "--seed", "4", "--out", str(f), "--plan-cache", str(tmp_path / "plans")]) == 0
    capsys.readouterr()
    return f


def test_simulate_columns(path_csv):
    head = path_csv.read_text().splitlines()
    assert head[0] == "t,B,dW,X" and len(head) == 402


@pytest.mark.parametrize("method", ["z", "kb", "bar"])
def test_estimate_methods(path_csv, capsys, method):
    assert main(["estimate", "--input", str(path_csv), "--hurst", "0.3", "--method", method]) == 0
    d = _json(capsys)
    assert -3 < d["theta_hat"] < 1


def test_estimate_w_needs_theta(path_csv, capsys):
    assert main(["estimate", "--input", str(path_csv), "--hurst", "0.3", "--method", "w"]) == 2
    assert main(["estimate", "--input", str(path_csv), "--hurst", "0.3", "--method", "w",
                 "--theta", "-1"]) == 0
    assert _json(capsys)["method"] == "w-form"


def test_estimate_profile(path_csv, tmp_path, capsys):
    prof = tmp_path / "prof.csv"
    assert main(["estimate", "--input", str(path_csv), "--hurst", "0.3", "--scheme", "quadrature",
                 "--profile", str(prof)]) == 0
    assert prof.read_text().startswith("t,theta_hat_t,I_t")


def test_estimate_check_from_record(tmp_path, capsys):
    f = tmp_path / "unit.csv"
    main(["simulate", "--hurst", "0.7", "--theta", "-1", "--n", "100", "--dt", "1", "--out", str(f)])
    capsys.readouterr()
    for rule in ("printed", "product"):
        assert main(["estimate", "--input", str(f), "--hurst", "0.7", "--method", "check",
                     "--rule", rule]) == 0
        assert _json(capsys)["n"] == 100
    rec = tmp_path / "rec.csv"
    rec.write_text("m,X_m\n" + "".join(f"{m},{0.1 * (-1) ** m + 0.01 * m}\n" for m in range(30)))
    assert main(["estimate", "--input", str(rec), "--hurst", "0.3", "--method", "check"]) == 0


def test_estimate_check_rejects_fine_spacing(path_csv, capsys):
    assert main(["estimate", "--input", str(path_csv), "--hurst", "0.3", "--method", "check"]) == 2


def test_estimate_missing_file(tmp_path, capsys):
    assert main(["estimate", "--input", str(tmp_path / "none.csv"), "--hurst", "0.3"]) == 1
    assert "none.csv" in capsys.readouterr().err


def test_experiment_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["experiment", "--config", str(CONFIGS / "smoke.toml"), "--out", str(out)])
    assert code in (0, 1)
    text = capsys.readouterr().out
    assert "bias_slope" in text and str(out) in text
    assert main(["report", str(out)]) == 0
    assert capsys.readouterr().out == (out / "report.json").read_text()


def test_experiment_overrides(tmp_path, capsys):
    out = tmp_path / "run"
    main(["experiment", "--config", str(CONFIGS / "smoke.toml"), "--out", str(out), "--reps", "31",
          "--hurst", "0.5", "--seed", "9"])
    d = json.loads((out / "report.json").read_text())
    assert d["seed"] == 9 and d["config"]["H"] == [0.5]
    assert all(c["reps"] == 31 for c in d["cells"])


def test_bad_config_and_usage(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 1\n")
    assert main(["experiment", "--config", str(bad)]) == 2
    bad.write_text('experiment = "nope"\n')
    assert main(["experiment", "--config", str(bad)]) == 2
    bad.write_text('drift = "nope"\n')
    assert main(["experiment", "--config", str(bad)]) == 2
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["verify", "--only", "AC-99"]) == 2


def test_verify_quick_subprocess():
    r = subprocess.run([sys.executable, "-m", "fbmle", "verify", "--quick"], capture_output=True,
                       text=True, timeout=300)
    lines = r.stdout.strip().splitlines()
    assert [ln.split()[0] for ln in lines[:-1]] == ["AC-1", "AC-3", "AC-12"]
    assert lines[-1].endswith("criteria pass")
    assert r.returncode == (0 if lines[-1].startswith("3/3") else 1)
