import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from octoconv.cli import bench_ratio, main
from octoconv.model import load_checkpoint

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_groups_inspect(capsys):
    code, out, _ = run(capsys, "groups", "inspect", "--format", "csv")
    assert code == 0
    rows = out.strip().splitlines()
    assert rows[0] == "group,order,proper_rotations,commutative,rho_is_homomorphism"
    assert [r.split(",")[1] for r in rows[1:]] == ["1", "8", "16", "24", "48"]
    assert all(r.endswith("True") for r in rows[1:])


def test_groups_cayley(capsys):
    code, out, _ = run(capsys, "groups", "--group", "d4", "--show-cayley")
    assert code == 0 and out.strip().splitlines()[-1].count(",") == 7


def test_check_equivariance_passes(capsys):
    code, out, _ = run(capsys, "check-equivariance", "--group", "O", "--depth", "3", "--size", "5")
    assert code == 0
    worst = float(out.strip().splitlines()[-1].split("worst float error ")[1].split(",")[0])
    assert worst <= 1e-4


def test_check_equivariance_trivial_group_exact(capsys):
    code, out, _ = run(capsys, "--format", "json-lines", "check-equivariance", "--group", "Z3")
    rows = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and rows == [{"group": "Z3", "h": 0, "integer_error": 0.0, "float_error": 0.0}]


def test_corrupted_rho_exits_2(capsys):
    code, _, err = run(capsys, "check-equivariance", "--group", "D4", "--corrupt-rho")
    assert code == 2
    assert err.startswith("octoconv: error:") and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["check-equivariance"],
    ["check-equivariance", "--group", "T"],
    ["train", "--group", "D4", "--train-size", "0", "--datagen-inline"],
    ["--format", "xml", "groups"],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err.startswith("octoconv: error:") and len(err.strip().splitlines()) == 1


def test_bad_config_key_exits_1(capsys, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlearnig_rate = 0.1\n")
    code, _, err = run(capsys, "--config", str(cfg), "train", "--group", "Z3", "--train-size", "4",
                       "--datagen-inline")
    assert code == 1 and "learnig_rate" in err
    cfg.write_text("[optimizer]\nlr = 1\n")
    assert run(capsys, "--config", str(cfg), "groups")[0] == 1


def test_evaluate_golden(capsys, tmp_path):
    curve = tmp_path / "curve.csv"
    code, out, _ = run(capsys, "evaluate", str(GOLDEN / "froc_candidates.csv"), str(GOLDEN / "froc_references.csv"),
                       "--curve-out", str(curve))
    assert code == 0
    assert "overall_score: 0.571429" in out
    assert curve.read_text() == (GOLDEN / "froc_curve.csv").read_text()
    code, out, _ = run(capsys, "evaluate", str(GOLDEN / "froc_candidates.csv"), str(GOLDEN / "froc_references.csv"),
                       "--format", "json-lines")
    last = json.loads(out.splitlines()[-1])
    assert last == {"fp_per_scan": "overall", "sensitivity": 4 / 7}


def test_evaluate_empty_candidates_scores_zero(capsys, tmp_path):
    empty = tmp_path / "c.csv"
    empty.write_text("scan_id,x_mm,y_mm,z_mm,probability\n")
    code, out, _ = run(capsys, "evaluate", str(empty), str(GOLDEN / "froc_references.csv"))
    assert code == 0 and "overall_score: 0.000000" in out


def test_evaluate_malformed_csv_reports_line(capsys, tmp_path):
    bad = tmp_path / "c.csv"
    bad.write_text("scan_id,x_mm,y_mm,z_mm,probability\nA,1,2,3,0.5\nA,1,2,x,0.5\n")
    code, _, err = run(capsys, "evaluate", str(bad), str(GOLDEN / "froc_references.csv"))
    assert code == 1 and f"{bad}:3:" in err and len(err.strip().splitlines()) == 1
    code, _, err = run(capsys, "evaluate", str(tmp_path / "missing.csv"), str(GOLDEN / "froc_references.csv"))
    assert code == 1 and err.startswith("octoconv: error:")


def test_datagen_then_train_from_disk(capsys, tmp_path):
    code, out, _ = run(capsys, "--seed", "5", "--output-dir", str(tmp_path), "datagen", "--sizes", "8",
                       "--val-size", "6", "--test-size", "10")
    assert code == 0
    index = (tmp_path / "index.csv").read_text().splitlines()
    assert index[0] == "sample_id,label,malignant,file" and len(index) == 1 + 8 + 6 + 10
    assert (tmp_path / index[1].split(",")[3]).exists()
    code, out, _ = run(capsys, "train", "--group", "D4", "--train-size", "8", "--max-epochs", "1",
                       "--output-dir", str(tmp_path), "--seed", "5")
    assert code == 0
    stem = tmp_path / "D4_n8_s5"
    assert load_checkpoint(f"{stem}.ckpt").config.group_name == "D4"
    assert Path(f"{stem}_loss.csv").read_text().startswith("epoch,train_loss,val_loss\n1,")
    preds = Path(f"{stem}_predictions.csv").read_text().splitlines()
    assert preds[0] == "scan_id,x_mm,y_mm,z_mm,probability" and len(preds) == 11
    code, out, _ = run(capsys, "evaluate", f"{stem}_predictions.csv", str(tmp_path / "test_references.csv"))
    assert code == 0 and "overall_score" in out


def test_train_without_data_exits_1(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--group", "D4", "--train-size", "8", "--output-dir", str(tmp_path))
    assert code == 1 and "index.csv" in err


def test_train_is_deterministic(capsys, tmp_path):
    outs = []
    for i in range(2):
        d = tmp_path / str(i)
        code, _, _ = run(capsys, "train", "--group", "Z3", "--train-size", "6", "--datagen-inline", "--val-size", "4",
                         "--test-size", "4", "--max-epochs", "2", "--output-dir", str(d))
        assert code == 0
        outs.append(d)
    for name in ("Z3_n6_s0_loss.csv", "Z3_n6_s0_predictions.csv", "Z3_n6_s0.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_seed_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("OCTOCONV_SEED", "9")
    monkeypatch.setenv("OCTOCONV_THREADS", "1")
    code, _, _ = run(capsys, "train", "--group", "Z3", "--train-size", "4", "--datagen-inline", "--val-size", "4",
                     "--test-size", "4", "--max-epochs", "1", "--output-dir", str(tmp_path))
    assert code == 0 and (tmp_path / "Z3_n4_s9.ckpt").exists()
    monkeypatch.setenv("OCTOCONV_SEED", "nine")
    assert run(capsys, "groups")[0] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_exits_3(capsys, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlearning_rate = 1e38\n")
    code, _, err = run(capsys, "--config", str(cfg), "train", "--group", "Z3", "--train-size", "6",
                       "--datagen-inline", "--val-size", "4", "--test-size", "4", "--max-epochs", "5",
                       "--output-dir", str(tmp_path))
    assert code == 3 and err.startswith("octoconv: error: non-finite")


def test_bench_reports_ratio(capsys):
    code, out, _ = run(capsys, "bench", "--groups", "D4", "--batch", "2", "--repeats", "1", "--format", "csv")
    assert code == 0
    header, row = out.strip().splitlines()
    assert header == "group,c_in,c_out,gconv_s,conv_s,ratio" and row.startswith("D4,24,24,")
    rec = bench_ratio("D4h", batch=1, spatial=(3, 6, 6), repeats=1)
    assert rec["c_in"] == 32 and rec["ratio"] > 0


@pytest.mark.skipif(shutil.which("octoconv") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["octoconv", "groups", "--format", "json-lines"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout.splitlines()[-1])["order"] == 48
    proc = subprocess.run([sys.executable, "-m", "octoconv.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("octoconv: error:")
