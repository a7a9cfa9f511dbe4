"""Desk-scale tile scorers trained with plain minibatch SGD.

Both kinds share one building block, a branch::

    3x3 valid conv (4 filters) -> tanh -> global average pool

``vanilla`` runs a single branch over all channels. ``multibranch`` runs one
branch on channel 0 (the plume channel) and a second on channels 1..C-1 (the
auxiliary channels). Pooled features are concatenated and fed to a linear
head and a sigmoid. Gradients are written out by hand.

Training runs in float32; the returned parameters are float64 arrays holding
float32-representable values, so checkpoints (float32 payload) round-trip
exactly.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .impute import ImputationStrategy, ZERO, impute_dataset_arrays
from .resample import BinSpec, build_plan, draw_epoch
from .rng import derive_seed, generator
from .tiles import Dataset

N_FILTERS = 4
KERNEL = 3
INIT_SCALE = 0.1
MAX_PARAMS = 10_000


class ModelKind(enum.Enum):
    VANILLA = "vanilla"
    MULTIBRANCH = "multibranch"

    @property
    def short(self) -> str:
        return "V" if self is ModelKind.VANILLA else "M"


def channel_groups(kind: ModelKind, channels: int) -> list[list[int]]:
    if channels < 1:
        raise ValueError("need at least one channel")
    if kind is ModelKind.VANILLA:
        return [list(range(channels))]
    if channels < 2:
        raise ValueError("multibranch needs at least two channels (plume + auxiliary)")
    return [[0], list(range(1, channels))]


@dataclass(eq=False)
class ModelParams:
    kind: ModelKind
    channels: int
    conv_w: list[np.ndarray]  # per branch, (F, C_b, 3, 3)
    conv_b: list[np.ndarray]  # per branch, (F,)
    head_w: np.ndarray  # (F * n_branches,)
    head_b: np.ndarray  # (1,)

    @property
    def groups(self) -> list[list[int]]:
        return channel_groups(self.kind, self.channels)

    def tensors(self) -> Iterator[np.ndarray]:
        for w, b in zip(self.conv_w, self.conv_b):
            yield w
            yield b
        yield self.head_w
        yield self.head_b

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.conv_w)):
            out += [f"conv{i}.w", f"conv{i}.b"]
        return out + ["head.w", "head.b"]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        parts, i = [], 0
        for t in self.tensors():
            parts.append(vec[i : i + t.size].reshape(t.shape).copy())
            i += t.size
        nb = len(self.conv_w)
        return ModelParams(
            self.kind, self.channels,
            conv_w=parts[0 : 2 * nb : 2], conv_b=parts[1 : 2 * nb : 2],
            head_w=parts[-2], head_b=parts[-1],
        )

    def astype(self, dtype) -> "ModelParams":
        return self.with_flat(self.flat().astype(dtype))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.channels == other.channels
            and [t.shape for t in self.tensors()] == [t.shape for t in other.tensors()]
            and np.array_equal(self.flat(), other.flat())
        )

    __hash__ = None  # type: ignore[assignment]


def init_params(kind: ModelKind, channels: int, seed: int) -> ModelParams:
    """Uniform(-0.1, 0.1) weights, zero biases.

    Values are rounded through float32 so a checkpoint of the initial
    parameters is exact.
    """
    groups = channel_groups(kind, channels)
    rng = generator(seed, "init_params", kind.value, channels)

    def uniform(shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(np.float32).astype(np.float64)

    conv_w = [uniform((N_FILTERS, len(g), KERNEL, KERNEL)) for g in groups]
    conv_b = [np.zeros(N_FILTERS) for _ in groups]
    head_w = uniform((N_FILTERS * len(groups),))
    params = ModelParams(kind, channels, conv_w, conv_b, head_w, np.zeros(1))
    if params.size > MAX_PARAMS:
        raise ValueError(f"{params.size} parameters exceeds the desk-scale limit {MAX_PARAMS}")
    return params


def _patches(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, P) with P = (H-2)*(W-2); rows ordered (c, dy, dx)."""
    b, c, h, w = x.shape
    if h < KERNEL or w < KERNEL:
        raise ValueError(f"tiles must be at least {KERNEL}x{KERNEL}")
    hp, wp = h - KERNEL + 1, w - KERNEL + 1
    out = np.empty((b, c, KERNEL, KERNEL, hp, wp), dtype=x.dtype)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            out[:, :, dy, dx] = x[:, :, dy : dy + hp, dx : dx + wp]
    return out.reshape(b, c * KERNEL * KERNEL, hp * wp)


def _forward(params: ModelParams, x: np.ndarray, keep: bool = False):
    patches = _patches(x)
    kk = KERNEL * KERNEL
    feats, cache = [], []
    for g, w, b in zip(params.groups, params.conv_w, params.conv_b):
        # groups are contiguous channel ranges, so this is a view
        p = patches[:, g[0] * kk : (g[-1] + 1) * kk]
        act = np.tanh(w.reshape(w.shape[0], -1) @ p + b[:, None])  # (B, F, P)
        feats.append(act.mean(axis=2))
        if keep:
            cache.append((p, act))
    feat = np.concatenate(feats, axis=1)
    logits = feat @ params.head_w + params.head_b[0]
    return logits, feat, cache


def _check_input(x: np.ndarray, channels: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValueError(f"expected (B, {channels}, H, W) input, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input; impute missing pixels first")
    return x


def logits_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = _check_input(x, params.channels).astype(params.head_w.dtype, copy=False)
    return _forward(params, x)[0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_batch(params: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Scores in (0, 1) for a stack of imputed tiles."""
    x = _check_input(x, params.channels)
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(0, x.shape[0], batch_size):
        out[i : i + batch_size] = sigmoid(logits_batch(params, x[i : i + batch_size]))
    return out


def forward(params: ModelParams, pixels: np.ndarray) -> float:
    """Score of one imputed C x H x W tile."""
    return float(forward_batch(params, np.asarray(pixels)[None])[0])


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, ModelParams]:
    """Mean binary cross-entropy over the batch and its gradient."""
    x = _check_input(x, params.channels).astype(params.head_w.dtype, copy=False)
    y = np.asarray(y, dtype=x.dtype)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.shape != (n,):
        raise ValueError("labels must have one entry per batch item")
    logits, feat, cache = _forward(params, x, keep=True)
    loss = float(np.mean(_softplus(logits) - y * logits))

    dz = (sigmoid(logits).astype(x.dtype) - y) / n
    head_w = feat.T @ dz
    head_b = np.array([dz.sum()], dtype=x.dtype)
    dfeat = np.outer(dz, params.head_w)
    conv_w, conv_b = [], []
    for k, ((p, act), w) in enumerate(zip(cache, params.conv_w)):
        f = w.shape[0]
        dact = dfeat[:, k * f : (k + 1) * f, None] * (1.0 - act * act) / act.shape[2]
        dw = (dact @ p.transpose(0, 2, 1)).sum(axis=0)
        conv_w.append(dw.reshape(w.shape))
        conv_b.append(dact.sum(axis=(0, 2)))
    grad = ModelParams(params.kind, params.channels, conv_w, conv_b, head_w, head_b)
    return loss, grad


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    imputation: ImputationStrategy = ZERO
    resample: bool = False
    bins: BinSpec = field(default_factory=BinSpec)
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["imputation"] = {"kind": self.imputation.name, "noise_scale": self.imputation.noise_scale}
        d["bins"] = self.bins.bin_count
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        imp = d.pop("imputation")
        d["imputation"] = ImputationStrategy.parse(imp["kind"], imp["noise_scale"])
        d["bins"] = BinSpec(d.pop("bins"))
        return cls(**d)


def epoch_order(n: int, epoch: int, cfg: TrainConfig, plan=None) -> np.ndarray:
    if plan is not None:
        return draw_epoch(plan, n, derive_seed(cfg.seed, "epoch", epoch))
    return generator(cfg.seed, "shuffle", epoch).permutation(n)


def train(
    ds: Dataset,
    kind: ModelKind,
    cfg: TrainConfig,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
    imputed: np.ndarray | None = None,
) -> ModelParams:
    """Minibatch SGD on binary cross-entropy.

    With ``cfg.resample`` each epoch is ``len(ds)`` indices drawn from the
    coverage-binned sampler; otherwise a fresh permutation. ``imputed`` lets
    a caller pass pre-imputed pixels (they must come from ``cfg.imputation``
    with seed ``derive_seed(cfg.seed, "impute")``).
    """
    labels = ds.labels()
    params = init_params(kind, ds.channels, derive_seed(cfg.seed, "init"))
    if cfg.epochs == 0 or len(ds) == 0:
        return params
    if imputed is None:
        imputed, _ = impute_dataset_arrays(ds, cfg.imputation, derive_seed(cfg.seed, "impute"))
    x = np.asarray(imputed, dtype=np.float32)
    y = labels.astype(np.float32)
    plan = build_plan(ds, cfg.bins) if cfg.resample else None
    work = params.astype(np.float32)
    lr = np.float32(cfg.learning_rate)
    n = len(ds)
    for epoch in range(cfg.epochs):
        order = epoch_order(n, epoch, cfg, plan)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, g = loss_and_grad(work, x[idx], y[idx])
            for t, gt in zip(work.tensors(), g.tensors()):
                t -= lr * gt
        if on_epoch is not None:
            on_epoch(epoch, work.astype(np.float64))
    return work.astype(np.float64)


def dataset_loss(params: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    total = 0.0
    for i in range(0, len(y), batch_size):
        z = logits_batch(params, x[i : i + batch_size])
        yy = np.asarray(y[i : i + batch_size], dtype=float)
        total += float(np.sum(_softplus(z) - yy * z))
    return total / len(y)


CKPT_MANIFEST = "manifest.json"
CKPT_PAYLOAD = "params.bin"


def save_checkpoint(
    params: ModelParams, path: str | os.PathLike, cfg: TrainConfig | None = None, extra: dict | None = None
) -> Path:
    """Write a checkpoint directory (JSON manifest + little-endian float32 payload)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    flat = params.flat()
    payload = flat.astype("<f4")
    if not np.array_equal(payload.astype(np.float64), flat):
        raise ValueError("parameters are not float32-representable; checkpoint would be lossy")
    manifest = {
        "kind": params.kind.value,
        "channels": params.channels,
        "shapes": {n: list(t.shape) for n, t in zip(params.names(), params.tensors())},
        "config": cfg.to_dict() if cfg is not None else None,
        "extra": extra or {},
    }
    (root / CKPT_PAYLOAD).write_bytes(payload.tobytes())
    (root / CKPT_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, TrainConfig | None, dict]:
    root = Path(path)
    m = json.loads((root / CKPT_MANIFEST).read_text())
    template = init_params(ModelKind(m["kind"]), m["channels"], 0)
    shapes = {n: list(t.shape) for n, t in zip(template.names(), template.tensors())}
    if shapes != m["shapes"]:
        raise ValueError(f"checkpoint shapes {m['shapes']} do not match {m['kind']} with C={m['channels']}")
    flat = np.frombuffer((root / CKPT_PAYLOAD).read_bytes(), dtype="<f4").astype(np.float64)
    params = template.with_flat(flat)
    cfg = TrainConfig.from_dict(m["config"]) if m.get("config") else None
    return params, cfg, m.get("extra", {})
