import json
import subprocess
import sys

import pytest

from goalcomp import __version__, training
from goalcomp.cli import main
from goalcomp.data import load_dataset
from goalcomp.evaluation import read_pgm
from goalcomp.models import load_bundle

FAST = ["--set", "epochs=[2,2,2]", "--set", "dataset.n_samples=300"]


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", *FAST, "--seed", "4", "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(trained_dir, capsys):
    for name in ("bundle.gcmp", "trainlog.csv", "metrics.csv", "confusion.csv", "resolved-config.json"):
        assert (trained_dir / name).is_file()
    resolved = json.loads((trained_dir / "resolved-config.json").read_text())
    assert resolved["seed"] == 4 and resolved["epochs"] == [2, 2, 2]


def test_train_seed_reproducible(trained_dir, tmp_path):
    assert main(["train", *FAST, "--seed", "4", "--out", str(tmp_path)]) == 0
    for name in ("bundle.gcmp", "trainlog.csv", "metrics.csv", "confusion.csv"):
        assert (tmp_path / name).read_bytes() == (trained_dir / name).read_bytes()


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *FAST, "--out", str(out), "--dry-run"]) == 0
    text = capsys.readouterr().out
    assert "plan: train CR=2 (n=8)" in text
    assert json.loads(text[: text.index("plan:")])["epochs"] == [2, 2, 2]
    assert not out.exists()
    assert main(["sweep", *FAST, "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()


def test_sweep(tmp_path, capsys):
    assert main(["sweep", *FAST, "--set", "cr_list=[2,8]", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "cr,n,fused_acc,baseline_acc,ratio,flops"
    assert (tmp_path / "sweep.csv").read_text() == out
    assert (tmp_path / "cr_8" / "bundle.gcmp").is_file()


def test_sweep_failed_row_exit_code(tmp_path, monkeypatch):
    real = training.phase3_joint

    def flaky(config, *args, **kw):
        if config.cr == 8:
            raise training.TrainingDivergedError(3, 0, float("inf"))
        return real(config, *args, **kw)

    monkeypatch.setattr(training, "phase3_joint", flaky)
    assert main(["sweep", *FAST, "--set", "cr_list=[2,8]", "--out", str(tmp_path)]) == 2
    assert "FAILED" in (tmp_path / "sweep.csv").read_text()


def test_evaluate(trained_dir, tmp_path, capsys):
    bundle = str(trained_dir / "bundle.gcmp")
    assert main(["evaluate", bundle, *FAST, "--seed", "4", "--out", str(tmp_path)]) == 0
    assert "fused_acc=" in capsys.readouterr().out
    assert (tmp_path / "metrics.csv").read_text() == (trained_dir / "metrics.csv").read_text()
    assert (tmp_path / "confusion.csv").read_text() == (trained_dir / "confusion.csv").read_text()


def test_evaluate_dimension_mismatch(trained_dir):
    assert main(["evaluate", str(trained_dir / "bundle.gcmp"), *FAST, "--set", "d=9", "--set", "R=9"]) == 1


def test_interpolate(trained_dir, tmp_path, capsys):
    bundle = str(trained_dir / "bundle.gcmp")
    out = tmp_path / "interp"
    assert main(["interpolate", bundle, "--start", "00000000", "--end", "11110000", "--out", str(out)]) == 0
    lines = (out / "frames.csv").read_text().splitlines()
    assert len(lines) == 1 + 5
    assert lines[1].split(",")[1] == "00000000" and lines[-1].split(",")[1] == "11110000"
    assert read_pgm(out / "frame004.pgm").shape == (4, 4)
    assert main(["interpolate", bundle, "--start", "0101", "--out", str(out)]) == 1


def test_reconstruct(trained_dir, tmp_path):
    out = tmp_path / "rec"
    assert main(["reconstruct", str(trained_dir / "bundle.gcmp"), *FAST, "--seed", "4", "--count", "3",
                 "--out", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 6
    assert main(["reconstruct", str(trained_dir / "bundle.gcmp"), *FAST, "--count", "0", "--out", str(out)]) == 1


def test_synth_data(tmp_path):
    out = tmp_path / "s.dset"
    assert main(["synth-data", "--set", "dataset.n_samples=50", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert (ds.N, ds.S, ds.d, ds.C) == (50, 2, 16, 4)


def test_inspect_bundle(trained_dir, capsys):
    assert main(["inspect-bundle", str(trained_dir / "bundle.gcmp")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("S=2 d=16 n=8 C=4 R=16")
    assert "baseline" in out and "frozen" in out and "inference flops=" in out
    assert load_bundle(trained_dir / "bundle.gcmp").baseline.frozen


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        [],
        ["train", "--no-such-flag"],
        ["train", "--set", "R=4"],
        ["train", "--set", "colour=1"],
    ],
)
def test_invalid_usage_exits_1(argv):
    assert main(argv) == 1


def test_missing_bundle_exits_1(tmp_path, capsys):
    assert main(["inspect-bundle", str(tmp_path / "missing.gcmp")]) == 1
    assert "cannot read bundle" in capsys.readouterr().err


def test_budget_message_cited(capsys, tmp_path):
    assert main(["train", "--set", "R=4", "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "R=4" in err and "n <= R" in err
    assert not (tmp_path / "x").exists()


def test_corrupt_bundle_exits_1(tmp_path):
    p = tmp_path / "b.gcmp"
    p.write_bytes(b"nope")
    assert main(["inspect-bundle", str(p)]) == 1


def test_divergence_exits_2(tmp_path, monkeypatch):
    monkeypatch.setattr(training, "DIVERGENCE_LIMIT", -1.0)
    assert main(["train", *FAST, "--out", str(tmp_path)]) == 2
    assert (tmp_path / "FAILED").is_file()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "goalcomp", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
    res = subprocess.run([sys.executable, "-m", "goalcomp", "train", "--set", "cr=0"], capture_output=True, text=True)
    assert res.returncode == 1 and "cr" in res.stderr
