import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from psflens.cli import main
from psflens.depth import write_depth_header
from psflens.imageio import read_image, read_pfm, write_pfm
from psflens.ingest import load_dataset
from psflens.regressor import init_model, load_model, loss_mse, save_model

DATA = Path(__file__).parent / "data"


def run(*argv):
    return main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def series1(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "s1"
    assert run("dataset-gen", "--preset", "series1", "--out", out) == 0
    return out


def test_dataset_gen_records_grid(series1, capsys):
    man = json.loads(Path(str(series1) + ".manifest").read_text())
    assert man["count"] == 243
    plan = man["meta"]["sampling_plan"]
    assert plan["grid_size"] == 276 and plan["point_count"] == 243
    assert len(plan["blocks"]) == 2
    record = json.loads(Path(str(series1) + ".run.json").read_text())
    assert record["params"]["preset"] == "series1" and record["params"]["seed"] == 0


def test_dataset_gen_prints_count(tmp_path, capsys):
    assert run("dataset-gen", "--plan", "empty", "--out", tmp_path / "e") == 0
    assert "wrote 0 entries" in capsys.readouterr().out
    assert len(load_dataset(tmp_path / "e")) == 0


def test_dataset_gen_invalid_range_leaves_nothing(tmp_path):
    assert run("dataset-gen", "--preset", "single", "--point", "0,5,0", "--out", tmp_path / "bad") == 1
    assert run("dataset-gen", "--preset", "series1", "--c-asym", "0", "--out", tmp_path / "bad") == 1
    assert list(tmp_path.iterdir()) == []


def test_train_reproducible_and_history(series1, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--dataset", series1, "--out", tmp_path / f"{name}.psfmodel",
                   "--epochs", 30, "--hidden", "8", "--seed", 4) == 0
    assert digest(tmp_path / "a.psfmodel") == digest(tmp_path / "b.psfmodel")
    assert digest(tmp_path / "a.psfmodel.history.csv") == digest(tmp_path / "b.psfmodel.history.csv")
    rows = list(csv.reader(open(tmp_path / "a.psfmodel.history.csv")))
    assert rows[0] == ["epoch", "train_mse", "val_mse"] and len(rows) == 31
    assert load_model(tmp_path / "a.psfmodel").layer_sizes == (4, 8, 169)


def test_train_missing_dataset(tmp_path):
    assert run("train", "--dataset", tmp_path / "nope", "--out", tmp_path / "m.psfmodel") == 2
    assert not (tmp_path / "m.psfmodel").exists()


def test_psf_eval_matches_singleton_loss(series1, tmp_path, capsys):
    model = init_model(seed=3)
    model.biases[-1][:] = 0.01
    save_model(model, tmp_path / "m.psfmodel")
    assert run("psf-eval", "--model", tmp_path / "m.psfmodel", "--dataset", series1,
               "--dz", 11.25, "--r", 2.25, "--phi", 0, "--out", tmp_path / "ev") == 0
    out = capsys.readouterr().out
    mse = float(out.split("mse=")[1].split()[0])
    ds = load_dataset(series1)
    idx = ds.lookup(ds.points[0].__class__(11.25, 2.25, 0.0))
    assert "dataset entry" in out
    assert mse == loss_mse(model, ds.subset([idx]))
    for suffix in (".pfm", "_ref.pfm", ".png", "_pair.png"):
        assert Path(str(tmp_path / "ev") + suffix).exists()
    assert read_pfm(str(tmp_path / "ev") + ".pfm").shape == (13, 13)
    assert read_image(str(tmp_path / "ev") + "_pair.png").shape == (13, 27)


def test_psf_eval_synthetic_reference(tmp_path, capsys):
    assert run("psf-eval", "--model", "synthetic", "--dz", -20, "--r", 1, "--phi", 40,
               "--out", tmp_path / "ev") == 0
    assert "mse=0.0 " in capsys.readouterr().out


def test_psf_eval_out_of_range(tmp_path):
    assert run("psf-eval", "--model", DATA / "tiny.psfmodel", "--r", 3.5, "--out", tmp_path / "ev") == 1
    assert not list(tmp_path.iterdir())


@pytest.mark.parametrize("model,golden", [
    ("synthetic", "golden_degrade_synthetic.pfm"),
    (DATA / "tiny.psfmodel", "golden_degrade_model.pfm"),
])
def test_degrade_golden(tmp_path, model, golden):
    out = tmp_path / "out.pfm"
    assert run("degrade", "--image", DATA / "rings48.pfm", "--model", model, "--defocus", 0,
               "--spacing", 16, "--out", out) == 0
    assert out.read_bytes() == (DATA / golden).read_bytes()


def test_degrade_checkerboard_demo(tmp_path):
    n = 128
    y, x = np.indices((n, n))
    write_pfm(tmp_path / "cb.pfm", (((y // 8) + (x // 8)) % 2).astype(float))
    assert run("degrade", "--image", tmp_path / "cb.pfm", "--model", "synthetic",
               "--defocus-gradient", "50,-50", "--spatially-invariant", "--r-max", 10,
               "--spacing", 16, "--out", tmp_path / "cb_out.pfm") == 0
    out = read_pfm(tmp_path / "cb_out.pfm")
    grad = np.abs(np.diff(out, axis=1)).mean(axis=0)
    assert grad[: n // 4].sum() < grad[::-1][: n // 4].sum()


def test_degrade_png_round(tmp_path):
    img = (np.indices((32, 32)).sum(axis=0) % 7) / 6
    from psflens.imageio import write_png
    write_png(tmp_path / "in.png", img)
    assert run("degrade", "--image", tmp_path / "in.png", "--model", "synthetic",
               "--gamma", "srgb", "--out", tmp_path / "out.png") == 0
    assert read_image(tmp_path / "out.png").shape == (32, 32)


def test_degrade_depth_file(tmp_path):
    depth = np.full((48, 48), 2.0)
    depth[:, 24:] = 0.3
    write_pfm(tmp_path / "d.pfm", depth)
    write_depth_header(tmp_path / "d.pfm", "linear_meters")
    assert run("degrade", "--image", DATA / "rings48.pfm", "--model", "synthetic",
               "--depth", tmp_path / "d.pfm", "--focus-distance", 2.0,
               "--out", tmp_path / "o.pfm") == 0
    out = read_pfm(tmp_path / "o.pfm")
    src = read_pfm(DATA / "rings48.pfm")
    # in-focus half stays sharper than the defocused half
    left = np.abs(np.diff(out[:, 4:20], axis=1)).mean()
    right = np.abs(np.diff(out[:, 28:44], axis=1)).mean()
    assert left > right
    assert out.shape == src.shape


def test_degrade_missing_depth_header(tmp_path, capsys):
    write_pfm(tmp_path / "d.pfm", np.ones((48, 48)))
    code = run("degrade", "--image", DATA / "rings48.pfm", "--model", "synthetic",
               "--depth", tmp_path / "d.pfm", "--out", tmp_path / "o.pfm")
    assert code == 1
    assert "FormatError" in capsys.readouterr().err
    assert not (tmp_path / "o.pfm").exists()


def test_error_report(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run("error-report", "--image", DATA / "rings48.pfm", "--model", "synthetic",
                   "--spacings", "16,1,4", "--out", tmp_path / name) == 0
    assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [int(r["spacing"]) for r in rows] == [1, 4, 16]
    assert float(rows[0]["max_abs_err"]) <= 1e-9
    assert "wall_time_s" not in rows[0]


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[global]\nseed = 9\n[train]\nepochs = 3\nhidden = 4\n")
    ds = tmp_path / "one"
    assert run("dataset-gen", "--preset", "single", "--out", ds) == 0
    assert run("train", "--config", cfg, "--dataset", ds, "--out", tmp_path / "m.psfmodel",
               "--epochs", 5) == 0
    rec = json.loads((tmp_path / "m.psfmodel.run.json").read_text())["params"]
    assert rec["epochs"] == 5 and rec["hidden"] == [4] and rec["seed"] == 9
    assert rec["lr"] == 10.0


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepoch = 3\n")
    assert run("train", "--config", cfg, "--dataset", "x", "--out", tmp_path / "m") == 2


def test_usage_errors(tmp_path):
    assert run("train") == 2
    assert run("bogus") == 2
    assert run("degrade", "--image", "x.pfm", "--model", "synthetic") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "psflens", "dataset-gen", "--preset", "single", "--out", str(tmp_path / "s")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and "wrote 1 entries" in proc.stdout
