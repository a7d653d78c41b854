"""Fully-connected regression network: field point -> PSF kernel.

Inputs are encoded as ``[dz/dz_scale, r/r_scale, cos(phi), sin(phi)]`` after
folding negative radii into the azimuth. Hidden layers use tanh, the output
layer is linear with ``size_k**2`` units. Training minimizes the mean squared
error of the raw outputs; clamping and renormalization are applied only when
a kernel is requested.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllZeroKernel, DivergenceDetected, FormatError, OutOfRange, ShapeMismatch
from .psf_core import FieldPoint, PsfKernel

MODEL_MAGIC = b"PSFMODEL"
MODEL_FORMAT_VERSION = 1
DEFAULT_HIDDEN = (64, 64)


@dataclass
class RegressorModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # weights[i] has shape (layer_sizes[i], layer_sizes[i+1])
    biases: list[np.ndarray]
    dz_scale: float = 50.0
    r_scale: float = 3.0
    pitch: float = 6.14
    activation: str = "tanh"
    output_activation: str = "identity"
    postprocess: str = "clamp_renormalize"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatch("need one weight matrix and bias per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise ShapeMismatch(f"layer {i}: weight shape {w.shape}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ShapeMismatch(f"layer {i}: bias shape {b.shape}")
        if self.layer_sizes[0] != 4:
            raise ShapeMismatch("input layer must have 4 units")
        k = math.isqrt(self.layer_sizes[-1])
        if k * k != self.layer_sizes[-1] or k % 2 == 0:
            raise ShapeMismatch("output layer must have size_k**2 units with odd size_k")
        for v in (self.dz_scale, self.r_scale):
            if not (math.isfinite(v) and v != 0):
                raise ValueError("normalization constants must be finite and nonzero")
        if self.activation != "tanh" or self.output_activation != "identity":
            raise ValueError("only tanh hidden / identity output layers are supported")

    @property
    def size_k(self) -> int:
        return math.isqrt(self.layer_sizes[-1])

    @property
    def r_max(self) -> float:
        return abs(self.r_scale)

    @property
    def dz_range(self) -> tuple[float, float]:
        return (-abs(self.dz_scale), abs(self.dz_scale))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "RegressorModel":
        return RegressorModel(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dz_scale,
            self.r_scale,
            self.pitch,
            self.activation,
            self.output_activation,
            self.postprocess,
        )

    def predict(self, dz, r, phi) -> np.ndarray:
        """Post-processed kernels for arrays of field points, shape (N, k, k)."""
        X = encode_batch(dz, r, phi, self.dz_scale, self.r_scale)
        return postprocess(forward_raw(self, X), self.size_k)

    def describe(self) -> dict:
        return {"kind": "regressor", "layer_sizes": list(self.layer_sizes)}


def init_model(
    layer_sizes=None,
    seed: int = 0,
    dz_scale: float = 50.0,
    r_scale: float = 3.0,
    pitch: float = 6.14,
    size_k: int = 13,
) -> RegressorModel:
    """Glorot-uniform weights, zero biases."""
    if layer_sizes is None:
        layer_sizes = (4, *DEFAULT_HIDDEN, size_k * size_k)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RegressorModel(tuple(layer_sizes), weights, biases, dz_scale, r_scale, pitch)


# ---------------------------------------------------------------------------
# encoding and inference


def encode_batch(dz, r, phi, dz_scale: float, r_scale: float) -> np.ndarray:
    dz = np.atleast_1d(np.asarray(dz, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    tol = 1e-9
    if np.any(np.abs(dz) > abs(dz_scale) * (1 + tol)) or np.any(np.abs(r) > abs(r_scale) * (1 + tol)):
        raise OutOfRange("field point outside the model's defocus / image-height range")
    if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(r)) and np.all(np.isfinite(phi))):
        raise OutOfRange("non-finite field point")
    # negative radius == positive radius on the opposite side
    phi = np.where(r < 0, phi + 180.0, phi)
    r = np.abs(r)
    phi = np.where(r == 0, 0.0, np.mod(phi, 360.0))
    theta = np.deg2rad(phi)
    return np.stack([dz / dz_scale, r / r_scale, np.cos(theta), np.sin(theta)], axis=1)


def encode_input(fp: FieldPoint, dz_scale: float = 50.0, r_scale: float = 3.0) -> np.ndarray:
    return encode_batch(fp.dz, fp.r, fp.phi, dz_scale, r_scale)[0]


def forward_raw(model: RegressorModel, X: np.ndarray, cache: list | None = None) -> np.ndarray:
    a = X
    n = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = np.tanh(z) if i < n - 1 else z
        if cache is not None:
            cache.append(a)
    return a


def postprocess(raw: np.ndarray, size_k: int) -> np.ndarray:
    """Clamp negatives and renormalize each row to unit sum -> (N, k, k)."""
    clamped = np.maximum(raw, 0.0)
    sums = clamped.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise AllZeroKernel("network produced no positive output for some field point")
    return (clamped / sums).reshape(-1, size_k, size_k)


def forward(model: RegressorModel, fp: FieldPoint) -> PsfKernel:
    X = encode_input(fp, model.dz_scale, model.r_scale)[None, :]
    vals = postprocess(forward_raw(model, X), model.size_k)[0]
    return PsfKernel(vals, model.pitch, normalized=True)


def _design(model: RegressorModel, dataset) -> tuple[np.ndarray, np.ndarray]:
    if dataset.size_k != model.size_k:
        raise ShapeMismatch(f"dataset kernels are {dataset.size_k}^2, model emits {model.size_k}^2")
    fa = dataset.field_array()
    X = encode_batch(fa[:, 0], fa[:, 1], fa[:, 2], model.dz_scale, model.r_scale)
    T = dataset.kernels.reshape(len(dataset), -1)
    return X, T


def loss_mse(model: RegressorModel, dataset, raw: bool = False) -> float:
    """Mean over entries and pixels of (prediction - target)**2.

    By default predictions are the post-processed kernels; ``raw=True`` gives
    the training objective instead.
    """
    X, T = _design(model, dataset)
    if len(T) == 0:
        raise ValueError("empty dataset")
    out = forward_raw(model, X)
    if not raw:
        out = postprocess(out, model.size_k).reshape(len(T), -1)
    return float(np.mean((out - T) ** 2))


# ---------------------------------------------------------------------------
# gradients and training


def loss_and_grad(model: RegressorModel, X: np.ndarray, T: np.ndarray):
    """Raw-output MSE and its gradient as [dW0, db0, dW1, db1, ...]."""
    if T.shape != (X.shape[0], model.layer_sizes[-1]):
        raise ShapeMismatch(f"targets of shape {T.shape} for output size {model.layer_sizes[-1]}")
    acts: list[np.ndarray] = []
    out = forward_raw(model, X, acts)
    diff = out - T
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        a_prev = X if i == 0 else acts[i - 1]
        grads[2 * i] = a_prev.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i - 1] ** 2)
    return loss, grads


def backward(model: RegressorModel, dataset) -> list[np.ndarray]:
    X, T = _design(model, dataset)
    return loss_and_grad(model, X, T)[1]


@dataclass
class TrainConfig:
    epochs: int = 20000
    learning_rate: float = 10.0
    momentum: float = 0.9
    seed: int = 0
    validation_fraction: float = 0.2
    patience: int = 0  # epochs without validation improvement; 0 disables early stop
    batch: str = "full"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.batch != "full":
            raise ValueError("only full-batch training is implemented")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    train_index: list[int] = field(default_factory=list)
    val_index: list[int] = field(default_factory=list)

    def best_train_mse(self) -> float:
        return self.train_mse[self.best_epoch]


def split_indices(n: int, validation_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * validation_fraction))
    if n_val >= n:
        n_val = n - 1
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(model: RegressorModel, dataset, cfg: TrainConfig, callback=None):
    """Full-batch gradient descent with momentum; returns (best model, history).

    The input model is not modified. The best model is the one with the lowest
    validation MSE (training MSE when there is no validation split).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    X, T = _design(model, dataset)
    tr, va = split_indices(len(dataset), cfg.validation_fraction, cfg.seed)
    Xtr, Ttr, Xva, Tva = X[tr], T[tr], X[va], T[va]
    hist = TrainHistory(train_index=tr.tolist(), val_index=va.tolist())

    work = model.copy()
    params = work.params()
    velocity = [np.zeros_like(p) for p in params]
    best, best_score, since_best = work.copy(), math.inf, 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            loss, grads = loss_and_grad(work, Xtr, Ttr)
            val = float(np.mean((forward_raw(work, Xva) - Tva) ** 2)) if len(va) else loss
            if not (math.isfinite(loss) and math.isfinite(val)):
                raise DivergenceDetected(f"loss became non-finite at epoch {epoch}")
            hist.train_mse.append(loss)
            hist.val_mse.append(val)
            if val < best_score:
                best, best_score, since_best = work.copy(), val, 0
                hist.best_epoch = epoch
            else:
                since_best += 1
                if cfg.patience and since_best >= cfg.patience:
                    break
            if callback is not None:
                callback(epoch, loss, val)
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
    return best, hist


# ---------------------------------------------------------------------------
# persistence: magic, u64 header length, JSON header, float64 payload


def save_model(model: RegressorModel, path) -> None:
    from .ingest import atomic_write_bytes

    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "output_activation": model.output_activation,
        "postprocess": model.postprocess,
        "norm_constants": {"dz_scale": model.dz_scale, "r_scale": model.r_scale},
        "pitch": model.pitch,
        "payload": "little-endian float64; per layer W (row-major, in x out) then b",
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    atomic_write_bytes(Path(path), MODEL_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


def load_model(path) -> RegressorModel:
    data = Path(path).read_bytes()
    if not data.startswith(MODEL_MAGIC) or len(data) < len(MODEL_MAGIC) + 8:
        raise FormatError(f"{path}: not a model file")
    (hlen,) = struct.unpack_from("<Q", data, len(MODEL_MAGIC))
    start = len(MODEL_MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen])
        if header["format_version"] != MODEL_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format_version {header['format_version']!r}")
        sizes = [int(n) for n in header["layer_sizes"]]
        norm = header["norm_constants"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupted header ({exc})") from None
    payload = data[start + hlen :]
    n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(payload) != 8 * n_params:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * n_params}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    weights, biases, pos = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos : pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(flat[pos : pos + b].copy())
        pos += b
    try:
        return RegressorModel(
            tuple(sizes),
            weights,
            biases,
            float(norm["dz_scale"]),
            float(norm["r_scale"]),
            float(header["pitch"]),
            header["activation"],
            header["output_activation"],
            header["postprocess"],
        )
    except (ValueError, KeyError, ShapeMismatch) as exc:
        raise FormatError(f"{path}: invalid model ({exc})") from None
