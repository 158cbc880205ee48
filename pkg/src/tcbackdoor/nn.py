"""Compact video classifier in plain numpy with hand-written backprop.

Per frame: 3x3 conv (zero padding) -> ReLU -> 2x2 mean pool -> 2x2 mean pool.
Frame features are aggregated over time (mean, optionally concatenated with
the per-feature temporal std), then go through a ReLU dense layer and a
linear output layer with softmax.

Inference, losses and input gradients run in float64; training batches run
in float32 for speed. Parameters are rounded to float32 precision at init
and after every training run so checkpoints round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .video import Dataset, IdentityDataset

PROB_FLOOR = 1e-12
STD_EPS = 1e-6
CHECKPOINT_MAGIC = b"CPM1"
PARAM_ORDER = ("conv_w", "conv_b", "w1", "b1", "w2", "b2")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "victim"  # victim | surrogate | identity
    channels: int = 8
    hidden: int = 64
    n_classes: int = 2
    temporal: str = "meanstd"  # meanstd | mean
    input_shape: tuple[int, int, int] = (16, 32, 32)  # (L, H, W)
    std_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        L, H, W = self.input_shape
        if H % 4 or W % 4:
            raise GeometryError("frame height and width must be multiples of 4")
        if self.temporal not in ("meanstd", "mean"):
            raise ValueError(f"unknown temporal aggregation {self.temporal!r}")

    @classmethod
    def victim(cls, input_shape=(16, 32, 32), seed=0) -> "ModelConfig":
        return cls("victim", 8, 64, 2, "meanstd", input_shape, seed=seed)

    @classmethod
    def surrogate(cls, input_shape=(16, 32, 32), seed=0) -> "ModelConfig":
        return cls("surrogate", 4, 32, 2, "mean", input_shape, seed=seed)

    @classmethod
    def identity(cls, n_identities: int, frame_shape=(32, 32), seed=0) -> "ModelConfig":
        return cls("identity", 8, 64, n_identities, "mean", (1, *frame_shape), seed=seed)

    @property
    def frame_features(self) -> int:
        _, H, W = self.input_shape
        return (H // 4) * (W // 4) * self.channels

    @property
    def aggregate_features(self) -> int:
        return self.frame_features * (2 if self.temporal == "meanstd" else 1)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv_w": (27, self.channels),
            "conv_b": (self.channels,),
            "w1": (self.aggregate_features, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.n_classes),
            "b2": (self.n_classes,),
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 8
    optimizer: str = "adam"  # adam | sgd
    beta1: float = 0.9  # also the sgd momentum
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    shapes = cfg.param_shapes()
    params = {}
    for name, shape in shapes.items():
        if name.startswith("b") or name == "conv_b":
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return {k: _f32(v) for k, v in params.items()}


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig) -> "Model":
        return cls(config, init_params(config))

    def n_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in self.config.param_shapes().values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


# -- forward / backward -----------------------------------------------------


def _as_batch(m: Model, x: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Coerce a video, frame, or batch into an (N, L, H, W, 3) array."""
    x = np.asarray(x, dtype=dtype)
    L, H, W = m.config.input_shape
    if x.ndim == 3 and L == 1:
        x = x[None, None]
    elif x.ndim == 4 and x.shape == (L, H, W, 3):
        x = x[None]
    elif x.ndim == 4 and L == 1 and x.shape[1:] == (H, W, 3):
        x = x[:, None]
    if x.ndim != 5 or x.shape[1:] != (L, H, W, 3):
        raise GeometryError(f"input shape {x.shape} does not match model geometry (L,H,W)={(L, H, W)}")
    return x


def _pool2(a: np.ndarray) -> np.ndarray:
    # strided adds beat reshape().mean() by ~3x here
    return (a[:, 0::2, 0::2] + a[:, 1::2, 0::2] + a[:, 0::2, 1::2] + a[:, 1::2, 1::2]) / 4.0


def _unpool2(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0


def _forward(m: Model, xb: np.ndarray):
    p = {k: v.astype(xb.dtype, copy=False) for k, v in m.params.items()}
    cfg = m.config
    N, L, H, W, _ = xb.shape
    frames = xb.reshape(N * L, H, W, 3)
    padded = np.pad(frames, ((0, 0), (1, 1), (1, 1), (0, 0)))
    kernel = p["conv_w"].reshape(3, 3, 3, cfg.channels)  # (cin, ki, kj, cout)
    z = np.broadcast_to(p["conv_b"], (N * L, H, W, cfg.channels)).copy()
    for ki in range(3):
        for kj in range(3):
            z += padded[:, ki : ki + H, kj : kj + W, :] @ kernel[:, ki, kj, :]
    a = np.maximum(z, 0.0)
    feat = _pool2(_pool2(a)).reshape(N, L, -1)
    mu = feat.mean(axis=1)
    if cfg.temporal == "meanstd":
        centred = feat - mu[:, None, :]
        sd = np.sqrt((centred**2).mean(axis=1) + STD_EPS)
        h0 = np.concatenate([mu, cfg.std_gain * sd], axis=1)
    else:
        centred = sd = None
        h0 = mu
    z1 = h0 @ p["w1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    logits = h1 @ p["w2"] + p["b2"]
    cache = dict(shape=xb.shape, padded=padded, z=z, centred=centred, sd=sd, h0=h0, z1=z1, h1=h1)
    return logits, cache


def _backward(m: Model, cache, dlogits: np.ndarray, want_input: bool = False):
    dtype = cache["padded"].dtype
    p = {k: v.astype(dtype, copy=False) for k, v in m.params.items()}
    dlogits = dlogits.astype(dtype, copy=False)
    cfg = m.config
    N, L, H, W, _ = cache["shape"]
    grads = {}
    grads["w2"] = cache["h1"].T @ dlogits
    grads["b2"] = dlogits.sum(axis=0)
    dz1 = (dlogits @ p["w2"].T) * (cache["z1"] > 0)
    grads["w1"] = cache["h0"].T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    dh0 = dz1 @ p["w1"].T
    F = cfg.frame_features
    dfeat = np.repeat((dh0[:, :F] / L)[:, None, :], L, axis=1)
    if cfg.temporal == "meanstd":
        dsd = cfg.std_gain * dh0[:, F:]
        dfeat += cache["centred"] * (dsd / (L * cache["sd"]))[:, None, :]
    dfeat = dfeat.reshape(N * L, H // 4, W // 4, cfg.channels)
    da = _unpool2(_unpool2(dfeat))
    dz = da * (cache["z"] > 0)
    padded = cache["padded"]
    dkernel = np.empty((3, 3, 3, cfg.channels), dtype=dtype)
    for ki in range(3):
        for kj in range(3):
            window = padded[:, ki : ki + H, kj : kj + W, :]
            dkernel[:, ki, kj, :] = np.tensordot(window, dz, axes=([0, 1, 2], [0, 1, 2]))
    grads["conv_w"] = dkernel.reshape(27, cfg.channels)
    grads["conv_b"] = dz.sum(axis=(0, 1, 2))
    if not want_input:
        return grads, None
    kernel = p["conv_w"].reshape(3, 3, 3, cfg.channels)
    dpad = np.zeros((N * L, H + 2, W + 2, 3), dtype=dtype)
    for ki in range(3):
        for kj in range(3):
            dpad[:, ki : ki + H, kj : kj + W, :] += dz @ kernel[:, ki, kj, :].T
    dx = dpad[:, 1:-1, 1:-1, :].reshape(N, L, H, W, 3)
    return grads, dx


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_dlogits(logits: np.ndarray, y: np.ndarray):
    """Per-sample -log(max(f_y, floor)) and the gradient of their mean."""
    logp = _log_softmax(logits)
    n = len(y)
    logp_y = logp[np.arange(n), y]
    floored = logp_y < np.log(PROB_FLOOR)
    losses = -np.maximum(logp_y, np.log(PROB_FLOOR))
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d[floored] = 0.0
    return losses, d / n


def forward_batch(m: Model, x: np.ndarray, chunk: int = 16) -> np.ndarray:
    xb = _as_batch(m, x)
    out = []
    for s in range(0, len(xb), chunk):
        logits, _ = _forward(m, xb[s : s + chunk])
        out.append(np.exp(_log_softmax(logits)))
    return np.concatenate(out) if out else np.zeros((0, m.config.n_classes))


def forward(m: Model, x: np.ndarray) -> np.ndarray:
    """Probability vector for a single video (or frame, for identity models)."""
    xb = _as_batch(m, x)
    if len(xb) != 1:
        raise GeometryError("forward takes a single input; use forward_batch for batches")
    return forward_batch(m, xb)[0]


def predict_batch(m: Model, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class
    return np.argmax(forward_batch(m, x), axis=1)


def predict(m: Model, x: np.ndarray) -> int:
    return int(np.argmax(forward(m, x)))


def loss(m: Model, x: np.ndarray, y: int) -> float:
    logits, _ = _forward(m, _as_batch(m, x))
    losses, _ = _loss_and_dlogits(logits, np.array([y]))
    return float(losses[0])


def input_gradient(m: Model, x: np.ndarray, y: int) -> np.ndarray:
    """d loss(m, x, y) / d x, shaped like ``x``."""
    xin = np.asarray(x)
    xb = _as_batch(m, xin)
    if len(xb) != 1:
        raise GeometryError("input_gradient takes a single input")
    logits, cache = _forward(m, xb)
    _, dlogits = _loss_and_dlogits(logits, np.array([y]))
    _, dx = _backward(m, cache, dlogits, want_input=True)
    return dx.reshape(xin.shape)


def input_gradients(m: Model, x: np.ndarray, y: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Per-sample input gradients of per-sample losses for a batch."""
    xb = _as_batch(m, x)
    y = np.broadcast_to(np.asarray(y), (len(xb),))
    out = np.empty_like(xb)
    for s in range(0, len(xb), chunk):
        logits, cache = _forward(m, xb[s : s + chunk])
        _, dlogits = _loss_and_dlogits(logits, y[s : s + chunk])
        _, dx = _backward(m, cache, dlogits * len(dlogits), want_input=True)
        out[s : s + chunk] = dx
    return out


def losses_batch(m: Model, x: np.ndarray, y: np.ndarray, chunk: int = 16) -> np.ndarray:
    xb = _as_batch(m, x)
    y = np.broadcast_to(np.asarray(y), (len(xb),))
    out = [_loss_and_dlogits(_forward(m, xb[s : s + chunk])[0], y[s : s + chunk])[0] for s in range(0, len(xb), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def param_gradients(m: Model, x: np.ndarray, y: np.ndarray, dtype=np.float64):
    xb = _as_batch(m, x, dtype)
    logits, cache = _forward(m, xb)
    losses, dlogits = _loss_and_dlogits(logits.astype(np.float64), np.asarray(y))
    grads, _ = _backward(m, cache, dlogits)
    return float(losses.mean()), {k: g.astype(np.float64) for k, g in grads.items()}


# -- training ---------------------------------------------------------------


def _training_arrays(d, cfg: ModelConfig):
    if isinstance(d, IdentityDataset):
        return d.frames[:, None], d.identities
    if isinstance(d, Dataset):
        return d.videos(), d.labels
    x, y = d
    return np.asarray(x), np.asarray(y)


def train(tcfg: TrainConfig, mcfg: ModelConfig, d, init: Optional[Model] = None, log=None) -> Model:
    """Train a fresh model (or a copy of ``init``) on ``d``.

    ``d`` is a video Dataset, an IdentityDataset, or an ``(x, y)`` pair.
    The result depends only on the configs and the data.
    """
    x, y = _training_arrays(d, mcfg)
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.min() < 0 or y.max() >= mcfg.n_classes:
        raise ValueError("labels outside the model's class range")
    m = init.copy() if init is not None else Model.create(mcfg)
    rng = np.random.default_rng(tcfg.seed)
    moments = {k: np.zeros_like(v) for k, v in m.params.items()}
    second = {k: np.zeros_like(v) for k, v in m.params.items()}
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(order), tcfg.batch_size):
            idx = order[s : s + tcfg.batch_size]
            batch_loss, grads = param_gradients(m, x[idx], y[idx], np.float32)
            total += batch_loss * len(idx)
            step += 1
            for k, g in grads.items():
                if tcfg.optimizer == "adam":
                    moments[k] = tcfg.beta1 * moments[k] + (1 - tcfg.beta1) * g
                    second[k] = tcfg.beta2 * second[k] + (1 - tcfg.beta2) * g * g
                    mhat = moments[k] / (1 - tcfg.beta1**step)
                    vhat = second[k] / (1 - tcfg.beta2**step)
                    m.params[k] = m.params[k] - tcfg.lr * mhat / (np.sqrt(vhat) + tcfg.eps)
                else:
                    moments[k] = tcfg.beta1 * moments[k] + g
                    m.params[k] = m.params[k] - tcfg.lr * moments[k]
        if log is not None:
            log(f"epoch {epoch + 1}/{tcfg.epochs} loss {total / len(y):.4f}")
    m.params = {k: _f32(v) for k, v in m.params.items()}
    return m


# -- checkpoints ------------------------------------------------------------


def save_model(m: Model, path: Path | str) -> None:
    """``CPM1`` | u32 header length | JSON config | f32 parameter blob."""
    header = json.dumps({"config": asdict(m.config), "params": list(PARAM_ORDER)}, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(m.params[k], dtype="<f4").tobytes() for k in PARAM_ORDER)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + blob)


def load_model(path: Path | str) -> Model:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8 : 8 + hlen])
    cfg_dict = header["config"]
    cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
    cfg = ModelConfig(**cfg_dict)
    offset = 8 + hlen
    params = {}
    for name in header["params"]:
        shape = cfg.param_shapes()[name]
        n = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 4 * n
    if offset != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Model(cfg, params)
