"""Regenerate the golden files under tests/data.

Run only after a deliberate change to degradation output; the CLI tests
compare against these files bit for bit.
"""

from pathlib import Path

import numpy as np

from psflens.cli import main
from psflens.imageio import write_pfm

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"


def test_image(n=48):
    y, x = np.indices((n, n)) - (n - 1) / 2
    rings = 0.5 + 0.5 * np.cos(np.hypot(x, y) / 2.0)
    noise = np.random.default_rng(0).random((n, n))
    return 0.7 * rings + 0.3 * noise


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"command failed: {argv}")


def main_():
    DATA.mkdir(parents=True, exist_ok=True)
    image = DATA / "rings48.pfm"
    write_pfm(image, test_image())
    tmp = DATA / "_series1"
    run("dataset-gen", "--preset", "series1", "--out", tmp)
    run("train", "--dataset", tmp, "--out", DATA / "tiny.psfmodel", "--epochs", 300,
        "--hidden", "16,16", "--seed", 0)
    for f in DATA.glob("_series1*"):
        f.unlink()
    for f in DATA.glob("tiny.psfmodel.*"):
        f.unlink()
    run("degrade", "--image", image, "--model", "synthetic", "--defocus", 0,
        "--spacing", 16, "--out", DATA / "golden_degrade_synthetic.pfm")
    run("degrade", "--image", image, "--model", DATA / "tiny.psfmodel", "--defocus", 0,
        "--spacing", 16, "--out", DATA / "golden_degrade_model.pfm")
    for f in DATA.glob("*.run.json"):
        f.unlink()


if __name__ == "__main__":
    main_()
