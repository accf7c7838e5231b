"""Dense CSI autoencoder trained with hand-written backprop and Adam.

Encoder: 2048 -> 512 (leaky ReLU) -> M (linear).
Decoder: M -> 512 (leaky ReLU) -> 2048 -> tanh -> unit-norm rescaling.

The loss is the batch-mean NMSE between input and reconstruction.
"""

from __future__ import annotations

import copy
import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.3
INPUT_SIZE = 2048
HIDDEN_SIZE = 512
NORM_EPS = 1e-12

CHECKPOINT_MAGIC = b"ADAE"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


def _leaky(a, slope):
    return np.where(a > 0, a, slope * a)


def _leaky_grad(a, slope):
    return np.where(a > 0, 1.0, slope).astype(a.dtype, copy=False)


class AutoencoderModel:
    """Parameter banks for the encoder and decoder.

    Each layer is a ``(W, b)`` pair with ``W`` of shape (fan_in, fan_out) so a
    batch ``x`` of row vectors maps to ``x @ W + b``.
    """

    def __init__(self, enc_layers, dec_layers, latent_size: int, slope: float = LEAKY_SLOPE):
        self.enc_layers = [(np.asarray(w), np.asarray(b)) for w, b in enc_layers]
        self.dec_layers = [(np.asarray(w), np.asarray(b)) for w, b in dec_layers]
        self.latent_size = int(latent_size)
        self.slope = slope
        dims = [self.enc_layers[0][0].shape[0]]
        for w, b in self.enc_layers + self.dec_layers:
            if w.shape[0] != dims[-1] or b.shape != (w.shape[1],):
                raise ValueError("layer shapes do not chain")
            dims.append(w.shape[1])
        if self.enc_layers[-1][0].shape[1] != self.latent_size:
            raise ValueError("encoder output does not match latent size")
        if dims[-1] != dims[0]:
            raise ValueError("decoder output size must equal the input size")
        if not self.latent_size < dims[0]:
            raise ValueError("latent size must be smaller than the input size")

    @property
    def input_size(self) -> int:
        return self.enc_layers[0][0].shape[0]

    @property
    def layers(self):
        return self.enc_layers + self.dec_layers

    @property
    def dtype(self):
        return self.enc_layers[0][0].dtype

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def astype(self, dtype) -> "AutoencoderModel":
        cast = lambda layers: [(w.astype(dtype), b.astype(dtype)) for w, b in layers]  # noqa: E731
        return AutoencoderModel(cast(self.enc_layers), cast(self.dec_layers), self.latent_size, self.slope)

    def copy(self) -> "AutoencoderModel":
        return copy.deepcopy(self)

    # -- forward -----------------------------------------------------------

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.input_size:
            raise ValueError(f"expected input length {self.input_size}, got {x.shape[-1]}")
        h = x
        last = len(self.enc_layers) - 1
        for i, (w, b) in enumerate(self.enc_layers):
            h = h @ w + b
            if i < last:
                h = _leaky(h, self.slope)
        return h

    def decode(self, z: np.ndarray, return_flag: bool = False):
        """Reconstruction with unit norm per sample; ``return_flag`` also reports zero-norm guards."""
        z = np.asarray(z, dtype=self.dtype)
        if z.shape[-1] != self.latent_size:
            raise ValueError(f"expected latent length {self.latent_size}, got {z.shape[-1]}")
        t = self._pre_norm(z)
        norm = np.linalg.norm(t, axis=-1, keepdims=True)
        guarded = norm < NORM_EPS
        y = t / np.maximum(norm, NORM_EPS)
        if return_flag:
            return y, bool(guarded.any())
        return y

    def decode_pre_norm(self, z: np.ndarray) -> np.ndarray:
        return self._pre_norm(np.asarray(z, dtype=self.dtype))

    def _pre_norm(self, h):
        last = len(self.dec_layers) - 1
        for i, (w, b) in enumerate(self.dec_layers):
            h = h @ w + b
            h = np.tanh(h) if i == last else _leaky(h, self.slope)
        return h

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))


def latent_from_ratio(ratio: float, input_size: int = INPUT_SIZE) -> int:
    """Latent size for a compression ratio counted in real elements."""
    return int(round(ratio * input_size))


def init_model(latent_size: int, seed: int, input_size: int = INPUT_SIZE, hidden: Sequence[int] = (HIDDEN_SIZE,), slope: float = LEAKY_SLOPE) -> AutoencoderModel:
    """Kaiming-uniform weights scaled by fan-in, zero biases."""
    if not 1 <= latent_size < input_size:
        raise ValueError("latent size must satisfy 1 <= M < input size")
    rng = np.random.default_rng(seed)
    gain2 = 2.0 / (1.0 + slope**2)

    def make(dims):
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(3.0 * gain2 / fan_in)
            layers.append((rng.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out)))
        return layers

    enc = make([input_size, *hidden, latent_size])
    dec = make([latent_size, *reversed(hidden), input_size])
    return AutoencoderModel(enc, dec, latent_size, slope)


def encode(model: AutoencoderModel, g_vec: np.ndarray) -> np.ndarray:
    return model.encode(g_vec)


def decode(model: AutoencoderModel, z: np.ndarray) -> np.ndarray:
    return model.decode(z)


# -- loss and backprop -------------------------------------------------------


def nmse_per_sample(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sum((x - y) ** 2, axis=-1) / np.sum(x**2, axis=-1)


def loss_and_grads(model: AutoencoderModel, x: np.ndarray):
    """Batch-mean NMSE and its gradient with respect to every parameter (same order as ``params``)."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 1:
        x = x[None]
    n = x.shape[0]
    slope = model.slope
    layers = model.layers
    n_enc = len(model.enc_layers)
    n_layers = len(layers)

    acts = [x]  # input to each layer
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        a = h @ w + b
        pre.append(a)
        if i == n_layers - 1:
            h = np.tanh(a)
        elif i == n_enc - 1:
            h = a
        else:
            h = _leaky(a, slope)
        acts.append(h)
    t = acts[-1]
    norm = np.maximum(np.linalg.norm(t, axis=1, keepdims=True), NORM_EPS)
    y = t / norm
    ref = np.sum(x**2, axis=1, keepdims=True)
    diff = y - x
    loss = float(np.mean(np.sum(diff**2, axis=1, keepdims=True) / ref))

    dy = 2.0 * diff / ref / n
    dt = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norm
    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    delta = dt * (1.0 - t**2)
    for i in range(n_layers - 1, -1, -1):
        w, _ = layers[i]
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ w.T
        if i - 1 != n_enc - 1:
            delta = delta * _leaky_grad(pre[i - 1], slope)
    return loss, grads


# -- optimiser and training ----------------------------------------------------


class Adam:
    """Adaptive-moment optimiser; updates parameters in place using preallocated buffers."""

    def __init__(self, params: list[np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._buf = [np.empty_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, g, m, v, buf in zip(params, grads, self.m, self.v, self._buf):
            m *= b1
            np.multiply(g, 1.0 - b1, out=buf)
            m += buf
            v *= b2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - b2
            v += buf
            # p -= lr / bc1 * m / (sqrt(v / bc2) + eps)
            np.multiply(v, 1.0 / bc2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= self.lr / bc1
            p -= buf


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_iterations: Optional[int] = None
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    model: AutoencoderModel
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train_nmse, val_nmse)
    iterations: int = 0

    @property
    def losses(self) -> list[float]:
        return [h[1] for h in self.history]


def evaluate_nmse(model: AutoencoderModel, data: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Per-sample NMSE of the reconstruction of real-layout inputs."""
    data = np.asarray(data)
    out = np.empty(len(data))
    for s in range(0, len(data), batch):
        x = data[s : s + batch].astype(model.dtype, copy=False)
        out[s : s + batch] = nmse_per_sample(x, model.reconstruct(x))
    return out


BatchPlan = Callable[[int, np.random.Generator], list]


def shuffled_batches(n: int, batch_size: int) -> BatchPlan:
    def plan(epoch, rng):
        order = rng.permutation(n)
        return [order[s : s + batch_size] for s in range(0, n, batch_size)]

    return plan


def train(
    model: AutoencoderModel,
    data: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    val: np.ndarray | None = None,
    plan: BatchPlan | None = None,
    callback: Callable[[int, AutoencoderModel], None] | None = None,
    callback_every: int = 0,
) -> TrainResult:
    """Minimise batch-mean NMSE with Adam; returns a new model and per-epoch history.

    ``plan`` maps (epoch, rng) to the batch index lists for that epoch and
    defaults to a seeded shuffle. ``callback(iteration, model)`` fires every
    ``callback_every`` iterations (and at iteration 0) when given.
    """
    data = np.asarray(data)
    if len(data) == 0:
        raise ValueError("training set is empty")
    norms = np.linalg.norm(data.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError(f"training samples must have unit norm (sample {int(np.argmax(np.abs(norms - 1.0)))})")
    dtype = np.dtype(cfg.dtype)
    work = model.astype(dtype)
    data = data.astype(dtype, copy=False)
    params = work.params()
    opt = Adam(params, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    plan = plan or shuffled_batches(len(data), cfg.batch_size)
    result = TrainResult(work)
    it = 0
    if callback and callback_every:
        callback(0, work)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in plan(epoch, rng):
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                break
            loss, grads = loss_and_grads(work, data[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, iteration {it}: lr={cfg.learning_rate}")
            opt.step(params, grads)
            it += 1
            total += loss * len(idx)
            count += len(idx)
            if callback and callback_every and it % callback_every == 0:
                callback(it, work)
        if count == 0:
            break
        val_nmse = float(np.mean(evaluate_nmse(work, val))) if val is not None and len(val) else float("nan")
        result.history.append((epoch, total / count, val_nmse))
        log.debug("epoch %d train %.5f val %.5f", epoch, total / count, val_nmse)
    result.iterations = it
    return result


# -- gradient verification -------------------------------------------------------


def gradient_check(
    model: AutoencoderModel,
    sample: np.ndarray,
    num_params: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    grad_scale: dict[int, float] | None = None,
) -> float:
    """Largest relative gap between backprop and central differences over random parameters.

    ``grad_scale`` maps a parameter-tensor index to a factor applied to its
    analytic gradient before comparison (a hook for checking the checker).
    Relative error is |a - n| / max(|a|, |n|, 1e-6).
    """
    m = model.astype(np.float64)
    x = np.asarray(sample, dtype=np.float64)
    _, grads = loss_and_grads(m, x)
    if grad_scale:
        grads = [g * grad_scale.get(i, 1.0) for i, g in enumerate(grads)]
    params = m.params()
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(num_params, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for f in np.sort(flat):
        t = int(np.searchsorted(bounds, f, side="right"))
        off = int(f - (bounds[t - 1] if t else 0))
        p = params[t].reshape(-1)
        orig = p[off]
        p[off] = orig + step
        up, _ = loss_and_grads(m, x)
        p[off] = orig - step
        down, _ = loss_and_grads(m, x)
        p[off] = orig
        num = (up - down) / (2 * step)
        ana = float(grads[t].reshape(-1)[off])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        worst = max(worst, rel)
    return worst


# -- persistence ---------------------------------------------------------------


def save_model(model: AutoencoderModel, path) -> None:
    layers = model.layers
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<HII", CHECKPOINT_VERSION, model.latent_size, len(layers))
    for w, b in layers:
        rows, cols = w.shape
        buf += struct.pack("<II", rows, cols)
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_model(path) -> AutoencoderModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an autoencoder checkpoint")
    version, latent, count = struct.unpack_from("<HII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 14
    layers = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        w = np.frombuffer(raw, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64)
        off += 8 * rows * cols
        b = np.frombuffer(raw, "<f8", cols, off).astype(np.float64)
        off += 8 * cols
        layers.append((w, b))
    split = next(i for i, (w, _) in enumerate(layers) if w.shape[1] == latent) + 1
    return AutoencoderModel(layers[:split], layers[split:], latent)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_nmse", "val_nmse"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
