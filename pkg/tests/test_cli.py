import hashlib
import subprocess
import sys

import pytest

from modil import __version__
from modil.cli import main
from modil.scenario import read_report_csv, read_summary_csv
from modil.sigmod import read_dataset

TINY_INI = """
[dataset]
catalog = OOK, BPSK, QPSK, 16QAM
frames_per_class = 10
length = 32
[schedule]
m = 2
k = 1
[learner]
strategy = finetune, bic
epochs_per_task = 1
batch_size = 16
feature_dim = 8
channels = 2,4,4
[memory]
budget = 8
[output]
timing = false
"""


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_gen_writes_manifest(tmp_path, tiny_ini):
    out = tmp_path / "data.modil"
    assert main(["gen", "--config", str(tiny_ini), "--output", str(out)]) == 0
    ds = read_dataset(out)
    assert len(ds) == 40 and ds.class_names == ["OOK", "BPSK", "QPSK", "16QAM"]
    manifest = (tmp_path / "data.modil.manifest.txt").read_text()
    assert f"sha256: {hashlib.sha256(out.read_bytes()).hexdigest()}" in manifest
    assert "  QPSK: 10" in manifest
    assert (tmp_path / "config.ini").exists()


def test_gen_dry_run_writes_nothing(tmp_path, tiny_ini, capsys):
    out = tmp_path / "sub" / "d.modil"
    assert main(["gen", "--config", str(tiny_ini), "--output", str(out), "--dry-run"]) == 0
    assert "would write 4 classes" in capsys.readouterr().out
    assert not out.parent.exists()


def test_run_dry_run_prints_schedule(tmp_path, tiny_ini, capsys):
    assert main(["run", "--config", str(tiny_ini), "--out", str(tmp_path / "o"), "--dry-run", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "class_seed=1 tasks=3" in out and "task 1:" in out
    assert not (tmp_path / "o").exists()


def test_run_writes_report_and_figure(tmp_path, tiny_ini, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", str(tiny_ini), "--out", str(out), "--jobs", "1"]) == 0
    text = capsys.readouterr().out
    assert "strategy=bic seed=0 budget=8 task=3/3 acc=" in text
    reports = read_report_csv(out / "report.csv")
    assert sorted(r.strategy for r in reports) == ["bic", "finetune"]
    assert all(len(r.accuracy) == 3 and r.wallclock == [0.0] * 3 for r in reports)
    svg = (out / "accuracy.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert (out / "config.ini").exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["bic_s0_b8_snr20.npz",
                                                                     "finetune_s0_b8_snr20.npz"]


def test_run_is_reproducible_and_resumable(tmp_path, tiny_ini):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(tiny_ini), "--out", str(a), "--strategy", "bic"]) == 0
    assert main(["run", "--config", str(tiny_ini), "--out", str(b), "--strategy", "bic", "--stop-after", "0"]) == 130
    assert not (b / "report.csv").exists()
    assert main(["run", "--config", str(tiny_ini), "--out", str(b), "--strategy", "bic"]) == 0
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "accuracy.svg").read_bytes() == (b / "accuracy.svg").read_bytes()


def test_sweep_and_report(tmp_path, tiny_ini, capsys):
    out = tmp_path / "s"
    args = ["sweep", "--config", str(tiny_ini), "--out", str(out), "--budgets", "4,8", "--seeds", "2",
            "--strategy", "bic", "--jobs", "1"]
    assert main(args) == 0
    rows = read_summary_csv(out / "summary.csv")
    assert [(r["budget"], r["strategy"], r["n_seeds"]) for r in rows] == [(4, "bic", 2), (8, "bic", 2)]
    refs = read_summary_csv(out / "reference.csv")
    assert sorted(r["strategy"] for r in refs) == ["finetune", "joint"]
    assert len(list((out / "runs").glob("*.csv"))) == 8
    first = (out / "sweep.svg").read_bytes()
    (out / "sweep.svg").unlink()
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert (out / "sweep.svg").read_bytes() == first


def test_sweep_rejects_bad_budgets(tmp_path, tiny_ini, capsys):
    base = ["sweep", "--config", str(tiny_ini), "--out", str(tmp_path), "--strategy", "bic"]
    assert main(base + ["--budgets", "8,4"]) == 1
    assert main(base + ["--budgets", "a,b"]) == 1
    assert "config error" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[dataset]\nlength = 32\n[learner]\nlr = -1\nstrategy = ewc\n")
    assert main(["run", "--config", str(p), "--dry-run"]) == 1
    err = capsys.readouterr().err
    assert f"{p}:5:" in err and "ewc" in err


def test_missing_dataset_is_a_data_error(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text(f"[dataset]\npath = {tmp_path / 'nope.modil'}\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err


def test_corrupt_dataset_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.modil"
    bad.write_bytes(b"NOTMODIL")
    p = tmp_path / "c.ini"
    p.write_text(f"[dataset]\npath = {bad}\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "magic" in capsys.readouterr().err


def test_report_without_csv(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_run_from_generated_file(tmp_path, tiny_ini):
    data = tmp_path / "d.modil"
    assert main(["gen", "--config", str(tiny_ini), "--output", str(data)]) == 0
    cfg = tmp_path / "from_file.ini"
    cfg.write_text(TINY_INI.replace("[dataset]", f"[dataset]\npath = {data}"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "f"), "--strategy", "finetune"]) == 0
    assert main(["run", "--config", str(tiny_ini), "--out", str(tmp_path / "g"), "--strategy", "finetune"]) == 0
    assert (tmp_path / "f" / "report.csv").read_bytes() == (tmp_path / "g" / "report.csv").read_bytes()


@pytest.mark.slow
def test_selfcheck_passes_and_detects_fault():
    ok = subprocess.run([sys.executable, "-m", "modil.cli", "selfcheck"], capture_output=True, text=True)
    assert ok.returncode == 0, ok.stdout + ok.stderr
    assert ok.stdout.count("PASS") == 5
    bad = subprocess.run([sys.executable, "-m", "modil.cli", "selfcheck", "--inject-fault", "conv1d"],
                         capture_output=True, text=True)
    assert bad.returncode == 4
    assert "FAIL gradients: conv1d" in bad.stdout
