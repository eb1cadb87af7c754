"""Optimization loop: MSE loss, Adam, stepped LR decay, early stopping,
and the versioned binary checkpoint format.

Checkpoint layout (little-endian): magic ``PVVLM1``, uint32 format version,
length-prefixed JSON manifest (model dims + variant), int64 seed, uint32
best epoch, float64 best val loss, uint32 tensor count, then per tensor:
uint16 name length + UTF-8 name, uint8 dtype tag (0 = float32), uint8 rank,
uint32 extents, raw ``<f4`` payload.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetSplit
from .fusion import build_model, forward_prepared, prepare_samples
from .model import ModelDims, ModelParams
from .numerics import Tensor, mean, mul, no_grad, scale, sub

log = logging.getLogger("pvvlm.training")

MAGIC = b"PVVLM1"
FORMAT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    eta0: float = 0.001
    gamma: float = 0.1
    step_s: int = 3
    seed: int = 0
    clip_norm: float = 1.0  # 0 disables gradient clipping

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "eta0", "gamma", "step_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")


def mse_loss(pred: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Mean squared error; gradient w.r.t. pred is 2(pred - target)/N."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float32))
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size < 1:
        raise ValueError("mse_loss needs at least one element")
    d = sub(pred, target)
    return mean(mul(d, d))


def lr_at_epoch(t: int, cfg: TrainConfig) -> float:
    """Stepped decay: eta0 * gamma^(t // step_s)."""
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    return cfg.eta0 * cfg.gamma ** (t // cfg.step_s)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """Bias-corrected Adam update, in place, trainable tensors only."""
    if set(params) != set(grads):
        raise ValueError(f"param/grad name mismatch: {sorted(set(params) ^ set(grads))}")
    if not state.m:
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = grads[name].astype(p.data.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)).astype(p.data.dtype)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Out-of-place: grad buffers may alias each other (pass-through backward
    closures), so they are replaced, never scaled in place.
    """
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stop after `patience` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_count = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_count = 0
            return True
        self.bad_count += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_count >= self.patience


def run_early_stopping(val_losses: list[float], patience: int) -> tuple[int, int]:
    """Simulate the stopping rule on a loss sequence.

    Returns (last epoch run, best epoch), 0-indexed; runs the whole sequence
    when patience is never exhausted.
    """
    stopper = EarlyStopper(patience)
    last = len(val_losses) - 1
    for epoch, loss in enumerate(val_losses):
        stopper.update(epoch, loss)
        if stopper.should_stop:
            last = epoch
            break
    return last, stopper.best_epoch


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    dims: ModelDims
    seed: int
    epoch: int
    best_val_loss: float
    tensors: dict[str, np.ndarray]

    def to_model(self) -> ModelParams:
        """Rebuild the partitioned model and overwrite it with saved payloads."""
        model = build_model(self.dims, self.seed)
        model.load_snapshot(self.tensors)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = json.dumps(ckpt.dims.to_manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(manifest))
    out += manifest
    out += struct.pack("<q", ckpt.seed)
    out += struct.pack("<I", ckpt.epoch)
    out += struct.pack("<d", ckpt.best_val_loss)
    out += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<BB", 0, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, expect_dims: ModelDims | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a PVVLM checkpoint)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (manifest_len,) = r.unpack("<I")
    try:
        manifest = json.loads(r.take(manifest_len).decode("utf-8"))
        dims = ModelDims.from_manifest(manifest)
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad dims manifest: {exc}") from exc
    (seed,) = r.unpack("<q")
    (epoch,) = r.unpack("<I")
    (best_val_loss,) = r.unpack("<d")
    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_tag, ndim = r.unpack("<BB")
        if dtype_tag != 0:
            raise CheckpointError(f"{path}: unknown dtype tag {dtype_tag} for {name}")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        payload = r.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if expect_dims is not None:
        theirs = dims.to_manifest()
        ours = expect_dims.to_manifest()
        for key in ours:
            if theirs.get(key) != ours[key]:
                raise CheckpointError(
                    f"{path}: manifest mismatch on {key!r}: checkpoint has {theirs.get(key)!r}, expected {ours[key]!r}"
                )
    return Checkpoint(dims=dims, seed=seed, epoch=epoch, best_val_loss=best_val_loss, tensors=tensors)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _val_mse(prepared_val, model: ModelParams, abl) -> float:
    total = 0.0
    with no_grad():
        for prep in prepared_val:
            pred = forward_prepared(prep, model, abl)
            diff = pred.data.astype(np.float64) - prep.target_norm.astype(np.float64)
            total += float(np.mean(diff * diff))
    return total / len(prepared_val)


def train(data: DatasetSplit, model: ModelParams, cfg: TrainConfig,
          abl=None) -> tuple[Checkpoint, list[dict]]:
    """Train the model's trainable partition; returns the best-val checkpoint.

    Per epoch: seeded shuffle, mini-batches with gradients averaged over the
    batch, optional global-norm clipping, Adam at the scheduled rate, then a
    validation pass. Stops when validation fails to improve (strict <) for
    `patience` consecutive epochs.
    """
    if not data.train or not data.val:
        raise ValueError("train and val splits must be nonempty")
    abl = abl if abl is not None else model.dims.ablation
    prepared_train = prepare_samples(data.train, model, abl)
    prepared_val = prepare_samples(data.val, model, abl)

    rng = np.random.default_rng([cfg.seed, 13])
    state = AdamState()
    stopper = EarlyStopper(cfg.patience)
    history: list[dict] = []
    best_snapshot = model.snapshot()
    best_epoch = 0
    frozen_before = {name: t.data.copy() for name, t in model.frozen.items()}

    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg)
        perm = rng.permutation(len(prepared_train))
        epoch_loss = 0.0
        for b_start in range(0, len(perm), cfg.batch_size):
            batch = perm[b_start : b_start + cfg.batch_size]
            model.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                prep = prepared_train[int(idx)]
                pred = forward_prepared(prep, model, abl)
                loss = mse_loss(pred, prep.target_norm)
                scale(loss, 1.0 / len(batch)).backward()
                batch_loss += loss.item() / len(batch)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss {batch_loss} at epoch {epoch}, batch {b_start // cfg.batch_size}"
                )
            grads = {
                name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in model.trainable.items()
            }
            if cfg.clip_norm > 0:
                clip_global_norm(grads, cfg.clip_norm)
            adam_step(model.trainable, grads, state, lr)
            epoch_loss += batch_loss * len(batch)
        train_mse = epoch_loss / len(prepared_train)
        val_mse = _val_mse(prepared_val, model, abl)
        history.append({"epoch": epoch, "lr": lr, "train_mse": train_mse, "val_mse": val_mse})
        log.info("epoch %d lr %.2e train %.6f val %.6f", epoch, lr, train_mse, val_mse)
        if stopper.update(epoch, val_mse):
            best_snapshot = model.snapshot()
            best_epoch = epoch
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    for name, before in frozen_before.items():
        if not np.array_equal(before, model.frozen[name].data):
            raise RuntimeError(f"frozen tensor {name} changed during training")

    ckpt = Checkpoint(
        dims=model.dims,
        seed=cfg.seed,
        epoch=best_epoch,
        best_val_loss=stopper.best,
        tensors=best_snapshot,
    )
    model.load_snapshot(best_snapshot)  # leave the model at its best weights
    return ckpt, history
