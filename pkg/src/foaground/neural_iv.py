"""Learned spatial audio front-end: channel-wise CNN, latent intensity
interaction, MLP projection, and a direction regression head.

Architecture, shapes use (batch, time, features) order:

* a 7-layer 1-D CNN with kernels (10, 3, 3, 3, 3, 2, 2) and strides
  (5, 2, 2, 2, 2, 2, 2), GELU after every layer, weights shared across the
  four FOA channels; 16 kHz input is downsampled by 5 * 2^6 = 320 for a
  50 Hz frame rate
* latent interaction h_C = f_W * f_C for C in {X, Y, Z}, concatenated to
  (frames, 3 * width)
* MLP projection Linear -> ReLU -> Linear to the embedding
* a linear head mapping each frame to a 3-vector; the frame mean is
  normalized into a unit direction

Parameters are stored in float32 (the checkpoint precision) while all math
runs in float64, which keeps checkpoints lossless and makes the analytic
gradients match central finite differences to high accuracy. Training
minimizes 1 - cos(angle) between the predicted and ground-truth directions;
the cosine form avoids the azimuth wrap discontinuity at +-180 degrees.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    EstimationError,
    FormatError,
    LengthError,
    NumericError,
    ShapeError,
    TrainingDivergedError,
)
from .foa_core import FoaSignal
from .spatial_frame import DoA, angles_from_dir, dir_from_angles

_MAGIC = b"NIV1"
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class NivConfig:
    kernel_sizes: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    channel_width: int = 64
    mlp_hidden: int = 256
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        object.__setattr__(self, "strides", tuple(self.strides))
        if len(self.kernel_sizes) != 7 or len(self.strides) != 7:
            raise ConfigurationError("the CNN is fixed at 7 layers")
        if min(self.kernel_sizes) < 1 or min(self.strides) < 1:
            raise ConfigurationError("kernels and strides must be >= 1")
        if min(self.channel_width, self.mlp_hidden, self.embed_dim) < 1:
            raise ConfigurationError("layer widths must be positive")

    def frame_count(self, n_samples: int) -> int:
        """Output frames for an input length, L' = floor((L - k) / s) + 1 per layer."""
        n = n_samples
        for k, s in zip(self.kernel_sizes, self.strides):
            if n < k:
                raise LengthError(
                    f"input of {n_samples} samples is below the receptive field; "
                    f"need at least {self.min_input_length()}",
                    required=self.min_input_length(),
                )
            n = (n - k) // s + 1
        return n

    def min_input_length(self) -> int:
        n = 1
        for k, s in zip(reversed(self.kernel_sizes), reversed(self.strides)):
            n = (n - 1) * s + k
        return n


@dataclass(frozen=True)
class TrainConfig:
    """Adam settings for the standalone direction head.

    ``crop_samples`` fixes the training window (taken from the start of each
    clip) so batches stack into one tensor.
    """

    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    crop_samples: int = 2000

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch size and steps must be positive")


class NivModel:
    """Weights plus config; parameters live in an ordered name -> array dict."""

    def __init__(self, config: NivConfig, params: dict[str, np.ndarray], steps_trained: int = 0):
        self.config = config
        self.params = params
        self.steps_trained = steps_trained

    @classmethod
    def initialize(cls, config: NivConfig) -> "NivModel":
        """Seeded init: centered uniform with 1/sqrt(fan_in) bounds."""
        rng = np.random.default_rng(config.seed)
        params: dict[str, np.ndarray] = {}

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(np.float32)

        c_in = 1
        for i, k in enumerate(config.kernel_sizes):
            c_out = config.channel_width
            params[f"conv{i}.w"] = uniform((c_out, c_in, k), c_in * k)
            params[f"conv{i}.b"] = uniform((c_out,), c_in * k)
            c_in = c_out
        w = config.channel_width
        params["mlp.w1"] = uniform((3 * w, config.mlp_hidden), 3 * w)
        params["mlp.b1"] = uniform((config.mlp_hidden,), 3 * w)
        params["mlp.w2"] = uniform((config.mlp_hidden, config.embed_dim), config.mlp_hidden)
        params["mlp.b2"] = uniform((config.embed_dim,), config.mlp_hidden)
        params["head.w"] = uniform((config.embed_dim, 3), config.embed_dim)
        params["head.b"] = uniform((3,), config.embed_dim)
        return cls(config, params)

    def params64(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self.params.items()}


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _conv1d(x, w, b, stride):
    """x (N, L, Cin), w (Cout, Cin, K) -> (N, T, Cout), no padding."""
    k = w.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]
    n, t = windows.shape[:2]
    flat = windows.reshape(n * t, -1)  # (N*T, Cin*K)
    wmat = w.transpose(1, 2, 0).reshape(-1, w.shape[0])
    return (flat @ wmat + b).reshape(n, t, w.shape[0])


def _conv1d_backward(x, w, stride, dout):
    """Gradients of ``_conv1d``: returns (dx, dw, db)."""
    c_out, c_in, k = w.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]
    n, t = windows.shape[:2]
    dout2 = dout.reshape(n * t, c_out)
    dw = (dout2.T @ windows.reshape(n * t, -1)).reshape(c_out, c_in, k)
    db = dout2.sum(axis=0)
    dwin = (dout2 @ w.reshape(c_out, -1)).reshape(n, t, c_in, k)
    dx = np.zeros_like(x)
    for kk in range(k):
        dx[:, kk : kk + (t - 1) * stride + 1 : stride, :] += dwin[:, :, :, kk]
    return dx, dw, db


def _cnn_forward(params, config, x):
    """x (N, L) waveforms -> (features (N, T, width), per-layer caches)."""
    h = x[:, :, None]
    caches = []
    for i, (k, s) in enumerate(zip(config.kernel_sizes, config.strides)):
        if h.shape[1] < k:
            raise LengthError(
                f"waveform too short for layer {i}; need at least "
                f"{config.min_input_length()} samples",
                required=config.min_input_length(),
            )
        z = _conv1d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], s)
        caches.append((h, z))
        h = _gelu(z)
    return h, caches


def _cnn_backward(params, config, caches, dout):
    grads = {}
    for i in reversed(range(7)):
        x_in, z = caches[i]
        dz = dout * _gelu_grad(z)
        dout, dw, db = _conv1d_backward(x_in, params[f"conv{i}.w"], config.strides[i], dz)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
    return dout[:, :, 0], grads


def _forward(params, config, x4):
    """Full pipeline on a batch x4 (B, 4, L); returns outputs and caches."""
    b, c, length = x4.shape
    if c != 4:
        raise ShapeError(f"expected 4 channels, got {c}")
    feats, cnn_caches = _cnn_forward(params, config, x4.reshape(b * 4, length))
    t, width = feats.shape[1:]
    f = feats.reshape(b, 4, t, width)
    fw = f[:, 0]
    h = np.concatenate([fw * f[:, 1], fw * f[:, 2], fw * f[:, 3]], axis=2)
    z1 = h @ params["mlp.w1"] + params["mlp.b1"]
    a1 = np.maximum(z1, 0.0)
    v = a1 @ params["mlp.w2"] + params["mlp.b2"]
    y = v @ params["head.w"] + params["head.b"]
    u = y.mean(axis=1)  # (B, 3)
    return u, {"cnn": cnn_caches, "f": f, "h": h, "z1": z1, "a1": a1, "v": v, "t": t}


def _backward(params, config, caches, du):
    """Backpropagate d(loss)/d(mean head output) through the pipeline."""
    b = du.shape[0]
    t = caches["t"]
    dy = np.repeat(du[:, None, :] / t, t, axis=1)
    grads = {
        "head.w": np.einsum("bte,btc->ec", caches["v"], dy),
        "head.b": dy.sum(axis=(0, 1)),
    }
    dv = dy @ params["head.w"].T
    grads["mlp.w2"] = np.einsum("bth,bte->he", caches["a1"], dv)
    grads["mlp.b2"] = dv.sum(axis=(0, 1))
    da1 = dv @ params["mlp.w2"].T
    dz1 = da1 * (caches["z1"] > 0)
    grads["mlp.w1"] = np.einsum("btf,bth->fh", caches["h"], dz1)
    grads["mlp.b1"] = dz1.sum(axis=(0, 1))
    dh = dz1 @ params["mlp.w1"].T
    f = caches["f"]
    width = f.shape[3]
    dparts = [dh[:, :, i * width : (i + 1) * width] for i in range(3)]
    df = np.empty_like(f)
    df[:, 0] = dparts[0] * f[:, 1] + dparts[1] * f[:, 2] + dparts[2] * f[:, 3]
    for i in range(3):
        df[:, i + 1] = dparts[i] * f[:, 0]
    _, cnn_grads = _cnn_backward(
        params, config, caches["cnn"], df.reshape(b * 4, t, width)
    )
    grads.update(cnn_grads)
    return grads


def _normalize_clip(x):
    """Scale a (4, n) clip to unit RMS over all channels (ratios preserved)."""
    rms = np.sqrt(np.mean(x**2))
    return x / max(rms, 1e-12)


def cnn_forward(model: NivModel, waveform) -> np.ndarray:
    """Latent frames (T, width) of one channel waveform."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("cnn_forward expects a 1-D waveform")
    feats, _ = _cnn_forward(model.params64(), model.config, x[None, :])
    return feats[0]


def interaction(fw, fx, fy, fz) -> np.ndarray:
    """Latent intensity interaction: concat(fW*fX, fW*fY, fW*fZ) on the last axis."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (fw, fx, fy, fz)]
    if len({a.shape for a in arrays}) != 1:
        raise ShapeError("all four feature maps must share one shape")
    fw, fx, fy, fz = arrays
    return np.concatenate([fw * fx, fw * fy, fw * fz], axis=-1)


def mlp_project(model: NivModel, h) -> np.ndarray:
    """Project interaction features to the embedding: Linear -> ReLU -> Linear."""
    h = np.asarray(h, dtype=np.float64)
    expected = 3 * model.config.channel_width
    if h.shape[-1] != expected:
        raise ShapeError(f"expected feature dim {expected}, got {h.shape[-1]}")
    p = model.params64()
    a1 = np.maximum(h @ p["mlp.w1"] + p["mlp.b1"], 0.0)
    return a1 @ p["mlp.w2"] + p["mlp.b2"]


def _batch_arrays(batch, crop: int | None = None):
    xs, gs = [], []
    for foa, doa in batch:
        x = foa.channels if isinstance(foa, FoaSignal) else np.asarray(foa, dtype=np.float64)
        if crop is not None:
            if x.shape[1] < crop:
                raise LengthError(
                    f"clip of {x.shape[1]} samples is shorter than the "
                    f"{crop}-sample training window",
                    required=crop,
                )
            x = x[:, :crop]
        xs.append(_normalize_clip(np.asarray(x, dtype=np.float64)))
        gs.append(dir_from_angles(doa).as_array() if isinstance(doa, DoA) else np.asarray(doa, dtype=np.float64))
    return xs, np.stack(gs)


def _loss_and_grads_arrays(params, config, x4, g):
    u, caches = _forward(params, config, x4)
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < 1e-12):
        raise EstimationError("head produced a zero mean direction")
    dhat = u / norms[:, None]
    b = x4.shape[0]
    loss = float(np.mean(1.0 - np.sum(dhat * g, axis=1)))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    # d/du of -dhat.g averaged over the batch, through the normalization.
    dot = np.sum(dhat * g, axis=1, keepdims=True)
    du = (-g + dhat * dot) / norms[:, None] / b
    grads = _backward(params, config, caches, du)
    return loss, grads


def evaluate_loss(model: NivModel, batch, params: dict | None = None) -> float:
    """Loss only; ``params`` may override the model weights (used by
    finite-difference gradient verification)."""
    p = params if params is not None else model.params64()
    xs, g = _batch_arrays(batch)
    total = 0.0
    for x, gi in zip(xs, g):
        u, _ = _forward(p, model.config, x[None])
        norm = np.linalg.norm(u[0])
        if norm < 1e-12:
            raise EstimationError("head produced a zero mean direction")
        total += 1.0 - float(u[0] @ gi) / norm
    return total / len(xs)


def loss_and_grads(model: NivModel, batch):
    """Mean cosine loss over (FoaSignal, DoA) pairs with exact gradients.

    Returns (loss, grads) where grads maps parameter names to float64 arrays
    aligned with ``model.params``. Clips of equal length are processed as one
    batched tensor; mixed lengths fall back to per-sample accumulation.
    """
    if not batch:
        raise ConfigurationError("batch must be non-empty")
    params = model.params64()
    xs, g = _batch_arrays(batch)
    lengths = {x.shape[1] for x in xs}
    if len(lengths) == 1:
        return _loss_and_grads_arrays(params, model.config, np.stack(xs), g)
    total_loss = 0.0
    total_grads = {k: np.zeros(v.shape) for k, v in params.items()}
    for x, gi in zip(xs, g):
        loss, grads = _loss_and_grads_arrays(params, model.config, x[None], gi[None])
        total_loss += loss
        for k in total_grads:
            total_grads[k] += grads[k]
    n = len(xs)
    return total_loss / n, {k: v / n for k, v in total_grads.items()}


def forward_doa(model: NivModel, foa: FoaSignal) -> DoA:
    """Deterministic DoA prediction for one clip."""
    x = _normalize_clip(np.asarray(foa.channels, dtype=np.float64))
    u, _ = _forward(model.params64(), model.config, x[None])
    norm = np.linalg.norm(u[0])
    if norm < 1e-12:
        raise EstimationError("prediction collapsed to the zero vector")
    return angles_from_dir(u[0] / norm)


def train(model: NivModel, dataset, cfg: TrainConfig):
    """Adam training with seeded epoch shuffling.

    ``dataset`` is a sequence of (FoaSignal | (4, n) array, DoA | unit vector)
    pairs; clips are cropped to ``cfg.crop_samples`` and RMS-normalized once
    up front. Mutates and returns the model together with the loss curve.
    Raises ``TrainingDivergedError`` when the loss exceeds 10x its initial
    value for 100 consecutive steps.
    """
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    xs, g = _batch_arrays(dataset, crop=cfg.crop_samples)
    data = np.stack(xs).astype(np.float32)
    n = data.shape[0]
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros(v.shape) for k, v in model.params.items()}
    v = {k: np.zeros(p.shape) for k, p in model.params.items()}
    curve: list[float] = []
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    diverged_streak = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        params = model.params64()
        loss, grads = _loss_and_grads_arrays(
            params, model.config, data[idx].astype(np.float64), g[idx]
        )
        curve.append(loss)
        if loss > 10.0 * curve[0]:
            diverged_streak += 1
            if diverged_streak >= 100:
                raise TrainingDivergedError(
                    f"loss {loss:.4f} stayed above 10x the initial "
                    f"{curve[0]:.4f} for 100 steps"
                )
        else:
            diverged_streak = 0
        t = step
        for k in model.params:
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grads[k]
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grads[k] ** 2
            m_hat = m[k] / (1.0 - cfg.beta1**t)
            v_hat = v[k] / (1.0 - cfg.beta2**t)
            update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
            model.params[k] = (params[k] - update).astype(np.float32)
    model.steps_trained += cfg.steps
    return model, curve


# Checkpoint format: magic "NIV1", little-endian uint32 header length, JSON
# header {version, config, steps_trained, tensors: [{name, shape}]}, then the
# tensors as IEEE-754 float32 little-endian in manifest order.

def save_model(model: NivModel, path) -> None:
    header = {
        "version": 1,
        "config": asdict(model.config),
        "steps_trained": model.steps_trained,
        "tensors": [
            {"name": k, "shape": list(v.shape)} for k, v in model.params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in model.params.values():
            fh.write(tensor.astype("<f4").tobytes())


def load_model(path) -> NivModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    config = NivConfig(**header["config"])
    params: dict[str, np.ndarray] = {}
    offset = 8 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        params[entry["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f4"
        ).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return NivModel(config, params, steps_trained=int(header.get("steps_trained", 0)))
