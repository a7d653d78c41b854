"""Command-line entry point: ``psflens <subcommand> ...``.

Exit codes: 0 success, 1 domain error (validation, divergence, bad file
content), 2 usage or I/O error.

Options can also come from an INI file given with ``--config``; keys live in
a section named after the subcommand (or ``[global]``) and use the long
option name with dashes or underscores. Flags override the file, the file
overrides built-in defaults. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .depth import CameraFocusSpec, DefocusMap, defocus_map, gradient_defocus, load_depth
from .errors import PsfError
from .imageio import pfm_bytes, png_bytes, read_image, write_image
from .ingest import FORMAT_VERSION as DATASET_FORMAT_VERSION
from .ingest import atomic_write_bytes, load_dataset, merge_datasets, save_dataset
from .psf_core import FieldPoint
from .regressor import (
    MODEL_FORMAT_VERSION,
    TrainConfig,
    forward,
    init_model,
    load_model,
    save_model,
    train,
)
from .sv_convolve import SensorGeometry, degrade, interpolation_error_report
from .synthetic_lens import (
    DEFAULT_OVERSAMPLE,
    DEFAULT_TARGET_PITCH_UM,
    PRESETS,
    SyntheticLensModel,
    SyntheticLensSpec,
    analytic_psf,
    generate_dataset,
    single_plan,
)


class UsageError(Exception):
    pass


def _floats(text):
    return tuple(float(v) for v in str(text).split(","))


def _ints(text):
    return tuple(int(v) for v in str(text).split(","))


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


LENS_OPTIONS = {
    "focal_length": (float, 6.0, "lens focal length (mm)"),
    "r_max": (float, 3.0, "maximum image height (mm)"),
    "dz_min": (float, -50.0, "minimum defocus (um)"),
    "dz_max": (float, 50.0, "maximum defocus (um)"),
    "sigma0": (float, 2.5, "best-focus blur (um)"),
    "growth": (float, 0.12, "blur growth per um of defocus"),
    "a_field": (float, 1.0, "field curvature (um/mm^2)"),
    "b_astig": (float, 4.0, "astigmatic split (um/mm^2)"),
    "c_asym": (float, 0.3, "defocus asymmetry"),
}

GEOM_OPTIONS = {
    "pitch": (float, DEFAULT_TARGET_PITCH_UM, "sensor pixel pitch (um)"),
    "center": (_floats, None, "optical center 'row,col' in pixels (default: image center)"),
    "defocus": (float, 0.0, "constant defocus (um)"),
    "defocus_gradient": (_floats, None, "'left,right' linear defocus across columns (um)"),
    "depth": (str, None, "depth image (PFM/PGM) with a <file>.hdr sidecar"),
    "focus_distance": (float, math.inf, "focused object distance (m)"),
    "spatially_invariant": (_bool, False, "query the model on axis only (R = 0)"),
}

COMMANDS = {
    "dataset-gen": {
        "help": "sample the synthetic lens into a dataset file pair",
        "options": {
            "out": (str, None, "output prefix (writes .manifest and .psfbin)"),
            "preset": (str, "series1", "series1 | series2 | both | empty | single"),
            "point": (_floats, (0.0, 0.0, 0.0), "'dz,r,phi' for the single preset"),
            "size_k": (int, 13, "kernel size (odd)"),
            "target_pitch": (float, DEFAULT_TARGET_PITCH_UM, "kernel pitch (um)"),
            "oversample": (int, DEFAULT_OVERSAMPLE, "midpoint samples per pixel and axis"),
            **LENS_OPTIONS,
        },
        "required": ("out",),
    },
    "train": {
        "help": "fit the PSF regressor to a dataset",
        "options": {
            "dataset": (str, None, "dataset prefix"),
            "out": (str, None, "output model file (.psfmodel)"),
            "history": (str, None, "history CSV (default: <out>.history.csv)"),
            "hidden": (_ints, (64, 64), "hidden layer widths, e.g. 64,64"),
            "epochs": (int, 20000, "training epochs"),
            "lr": (float, 10.0, "learning rate"),
            "momentum": (float, 0.9, "momentum"),
            "val_fraction": (float, 0.2, "held-out fraction of field points"),
            "patience": (int, 0, "early-stop patience in epochs (0 = off)"),
        },
        "required": ("dataset", "out"),
    },
    "psf-eval": {
        "help": "evaluate the model at one field point against a reference kernel",
        "options": {
            "model": (str, None, "model file or 'synthetic'"),
            "dz": (float, 0.0, "defocus (um)"),
            "r": (float, 0.0, "image height (mm)"),
            "phi": (float, 0.0, "azimuth (deg)"),
            "dataset": (str, None, "reference dataset prefix (default: synthetic lens)"),
            "out": (str, None, "output prefix for kernel dumps"),
            **LENS_OPTIONS,
        },
        "required": ("model", "out"),
    },
    "degrade": {
        "help": "apply the spatially variant PSF to an image",
        "options": {
            "image": (str, None, "input image (PFM or PNG)"),
            "model": (str, None, "model file or 'synthetic'"),
            "out": (str, None, "output image (.pfm or .png)"),
            "spacing": (int, 32, "kernel grid spacing (pixels)"),
            "gamma": (str, "linear", "PNG transfer curve: linear | srgb"),
            "bits": (int, 8, "PNG output bit depth"),
            "no_mask": (_bool, False, "do not black out pixels beyond r_max"),
            **GEOM_OPTIONS,
            **LENS_OPTIONS,
        },
        "required": ("image", "model", "out"),
    },
    "error-report": {
        "help": "tabulate grid-interpolation error against per-pixel kernels",
        "options": {
            "image": (str, None, "input image (PFM or PNG)"),
            "model": (str, None, "model file or 'synthetic'"),
            "out": (str, None, "output CSV"),
            "spacings": (_ints, (1, 8, 16, 32, 64), "grid spacings"),
            "gamma": (str, "linear", "PNG transfer curve: linear | srgb"),
            "timing": (_bool, False, "add a wall_time_s column (not reproducible)"),
            **GEOM_OPTIONS,
            **LENS_OPTIONS,
        },
        "required": ("image", "model", "out"),
    },
}

GLOBAL_OPTIONS = {
    "seed": (int, 0, "random seed"),
    "threads": (int, 1, "worker threads for the convolution"),
}

BOOL_FLAGS = {"spatially_invariant", "no_mask", "timing"}
ALIASES = {"preset": ("--plan",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psflens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"psflens {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with option defaults")
    for name, (typ, _, hlp) in GLOBAL_OPTIONS.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=hlp)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, info in COMMANDS.items():
        p = sub.add_parser(cmd, help=info["help"], parents=[common])
        for name, (typ, default, hlp) in info["options"].items():
            flags = ("--" + name.replace("_", "-"), *ALIASES.get(name, ()))
            if name in BOOL_FLAGS:
                p.add_argument(*flags, dest=name, action="store_const", const=True, default=None, help=hlp)
            else:
                p.add_argument(*flags, dest=name, type=typ, default=None,
                               help=f"{hlp} [default: {default}]")
    return parser


def read_config(path, command: str) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    known = dict(GLOBAL_OPTIONS, **COMMANDS[command]["options"])
    out = {}
    for section in cp.sections():
        if section not in COMMANDS and section != "global":
            raise UsageError(f"{path}: unknown section [{section}]")
        if section not in (command, "global"):
            continue
        for key, raw in cp.items(section):
            name = key.replace("-", "_")
            if name not in known:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                out[name] = known[name][0](raw)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    known = dict(GLOBAL_OPTIONS, **COMMANDS[args.command]["options"])
    params = {name: spec[1] for name, spec in known.items()}
    if args.config:
        params.update(read_config(args.config, args.command))
    for name in known:
        val = getattr(args, name, None)
        if val is not None:
            params[name] = val
    missing = [n for n in COMMANDS[args.command]["required"] if params.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if params["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return params


# ---------------------------------------------------------------------------
# helpers


def lens_spec(p: dict) -> SyntheticLensSpec:
    return SyntheticLensSpec(
        f=p["focal_length"], r_max=p["r_max"], dz_min=p["dz_min"], dz_max=p["dz_max"],
        sigma0=p["sigma0"], growth=p["growth"], a_field=p["a_field"], b_astig=p["b_astig"],
        c_asym=p["c_asym"], seed=p.get("seed", 0),
    )


def open_model(p: dict):
    if p["model"] == "synthetic":
        return SyntheticLensModel(lens_spec(p), pitch=p.get("pitch", DEFAULT_TARGET_PITCH_UM))
    return load_model(p["model"])


def run_record(command: str, params: dict, outputs: list) -> bytes:
    record = {
        "tool": "psflens",
        "version": __version__,
        "command": command,
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(params.items())},
        "formats": {"dataset": DATASET_FORMAT_VERSION, "model": MODEL_FORMAT_VERSION, "image": "PFM"},
        "outputs": [str(o) for o in outputs],
    }
    return (json.dumps(record, indent=1, sort_keys=True, default=str) + "\n").encode()


def write_run_record(prefix, command, params, outputs) -> None:
    atomic_write_bytes(Path(str(prefix) + ".run.json"), run_record(command, params, outputs))


def load_input_image(path, gamma):
    return read_image(path, gamma=gamma)


def defocus_source(p: dict, geom: SensorGeometry, dz_range):
    if p["depth"]:
        depth = load_depth(p["depth"])
        if depth.shape != geom.shape:
            raise PsfError(f"depth map {depth.shape} does not match image {geom.shape}")
        spec = CameraFocusSpec(f=p["focal_length"], o_focus=p["focus_distance"])
        return defocus_map(spec, depth, dz_range)
    if p["defocus_gradient"]:
        if len(p["defocus_gradient"]) != 2:
            raise UsageError("--defocus-gradient takes 'left,right'")
        left, right = p["defocus_gradient"]
        return gradient_defocus(geom.width, geom.height, left, right)
    return float(p["defocus"])


def geometry_for(p: dict, shape) -> SensorGeometry:
    center = p["center"]
    if center is not None and len(center) != 2:
        raise UsageError("--center takes 'row,col'")
    return SensorGeometry(shape[1], shape[0], p["pitch"], center, p["r_max"])


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_gen(p: dict) -> int:
    spec = lens_spec(p)
    preset = p["preset"]
    if preset == "both":
        plans = [PRESETS["series1"](), PRESETS["series2"]()]
    elif preset == "single":
        if len(p["point"]) != 3:
            raise UsageError("--point takes 'dz,r,phi'")
        plans = [single_plan(*p["point"])]
    elif preset in PRESETS:
        plans = [PRESETS[preset]()]
    else:
        raise UsageError(f"unknown preset {preset!r}")
    parts = [generate_dataset(spec, plan, p["size_k"], p["target_pitch"], p["oversample"]) for plan in plans]
    ds = parts[0] if len(parts) == 1 else merge_datasets(*parts)
    paths = save_dataset(ds, p["out"])
    write_run_record(p["out"], "dataset-gen", p, paths)
    for plan in plans:
        print(f"{plan.name}: {plan.grid_size()} grid points, {len(plan.field_points())} unique")
    print(f"wrote {len(ds)} entries to {paths[0]}")
    return 0


def cmd_train(p: dict) -> int:
    ds = load_dataset(p["dataset"])
    if len(ds) == 0:
        raise PsfError("dataset is empty")
    meta = ds.meta
    dz_scale = max(abs(meta.get("dz_min", -50.0)), abs(meta.get("dz_max", 50.0)))
    sizes = (4, *p["hidden"], ds.size_k * ds.size_k)
    model = init_model(sizes, p["seed"], dz_scale, meta.get("r_max", 3.0), ds.pitch, ds.size_k)
    cfg = TrainConfig(
        epochs=p["epochs"], learning_rate=p["lr"], momentum=p["momentum"], seed=p["seed"],
        validation_fraction=p["val_fraction"], patience=p["patience"],
    )
    best, hist = train(model, ds, cfg)
    history = p["history"] or p["out"] + ".history.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse"])
    for e, (a, b) in enumerate(zip(hist.train_mse, hist.val_mse)):
        w.writerow([e, repr(a), repr(b)])
    save_model(best, p["out"])
    atomic_write_bytes(Path(history), buf.getvalue().encode())
    write_run_record(p["out"], "train", p, [p["out"], history])
    print(f"best epoch {hist.best_epoch}: train_mse={hist.train_mse[hist.best_epoch]!r} "
          f"val_mse={hist.val_mse[hist.best_epoch]!r}")
    return 0


def cmd_psf_eval(p: dict) -> int:
    model = open_model(p)
    fp = FieldPoint(p["dz"], p["r"], p["phi"])
    if isinstance(model, SyntheticLensModel):
        pred = analytic_psf(model.spec, fp, model.size_k, model.pitch).values
    else:
        pred = forward(model, fp).values
    ref, ref_name = None, None
    if p["dataset"]:
        ds = load_dataset(p["dataset"])
        idx = ds.lookup(fp)
        if idx is not None:
            ref, ref_name = ds.kernels[idx], f"dataset entry {idx}"
        elif ds.meta.get("source", {}).get("kind") == "synthetic_lens":
            src = ds.meta["source"]
            spec = SyntheticLensSpec.from_dict(src["spec"])
            ref = analytic_psf(spec, fp, ds.size_k, ds.pitch, src["oversample"]).values
            ref_name = "synthetic lens of dataset"
    if ref is None:
        ref = analytic_psf(lens_spec(p), fp, pred.shape[0], getattr(model, "pitch", DEFAULT_TARGET_PITCH_UM)).values
        ref_name = "synthetic lens"
    if ref.shape != pred.shape:
        raise PsfError(f"reference kernel {ref.shape} vs prediction {pred.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    out = p["out"]
    peak = max(pred.max(), ref.max())
    gap = np.zeros((pred.shape[0], 1))
    pair = np.hstack([ref / peak, gap, pred / peak])
    files = {
        out + ".pfm": pfm_bytes(pred),
        out + "_ref.pfm": pfm_bytes(ref),
        out + ".png": png_bytes(pred / pred.max(), 16),
        out + "_pair.png": png_bytes(pair, 16),
    }
    for path, data in files.items():
        atomic_write_bytes(Path(path), data)
    write_run_record(out, "psf-eval", p, list(files))
    rows, cols = np.indices(pred.shape)
    cy, cx = float((rows * pred).sum()), float((cols * pred).sum())
    print(f"field point dz={fp.dz} um r={fp.r} mm phi={fp.phi} deg; reference: {ref_name}")
    print(f"mse={mse!r} nmse={mse / float(np.mean(ref ** 2))!r} peak={float(pred.max())!r} "
          f"centroid=({cy:.4f}, {cx:.4f})")
    return 0


def cmd_degrade(p: dict) -> int:
    image = load_input_image(p["image"], p["gamma"])
    geom = geometry_for(p, image.shape[:2])
    model = open_model(p)
    defocus = defocus_source(p, geom, model.dz_range)
    out = degrade(image, model, geom, defocus, p["spacing"], p["spatially_invariant"],
                  p["threads"], apply_mask=not p["no_mask"])
    write_image(p["out"], out, p["bits"], p["gamma"])
    write_run_record(p["out"], "degrade", p, [p["out"]])
    print(f"wrote {p['out']} ({geom.width}x{geom.height}, spacing {p['spacing']})")
    return 0


def cmd_error_report(p: dict) -> int:
    image = load_input_image(p["image"], p["gamma"])
    geom = geometry_for(p, image.shape[:2])
    model = open_model(p)
    defocus = defocus_source(p, geom, model.dz_range)
    t0 = time.perf_counter()
    rows = interpolation_error_report(image, model, geom, defocus, p["spacings"],
                                      p["spatially_invariant"], p["threads"])
    cols = ["spacing", "nodes", "max_abs_err", "mean_abs_err"] + (["wall_time_s"] if p["timing"] else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) for c in cols])
    atomic_write_bytes(Path(p["out"]), buf.getvalue().encode())
    write_run_record(p["out"], "error-report", p, [p["out"]])
    for r in rows:
        print(f"s={r['spacing']:4d} max={r['max_abs_err']:.3e} mean={r['mean_abs_err']:.3e} "
              f"t={r['wall_time_s']:.2f}s")
    print(f"total {time.perf_counter() - t0:.1f}s")
    return 0


HANDLERS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "psf-eval": cmd_psf_eval,
    "degrade": cmd_degrade,
    "error-report": cmd_error_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        params = resolve(args)
        return HANDLERS[args.command](params)
    except UsageError as exc:
        print(f"psflens: usage error: {exc}", file=sys.stderr)
        return 2
    except (PsfError, ValueError) as exc:
        print(f"psflens: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"psflens: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
