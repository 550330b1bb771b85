"""Adam training loop with global-norm gradient clipping, gradient
accumulation, early stopping on dev recall@1, and bit-exact checkpoints.

The default protocol: learning rate 5e-5, clip 0.25, effective batch
256 as 2 accumulated micro-batches of 128, dropout 0.4, at most 10
epochs with early stopping. One seeded generator drives shuffling and
dropout in a fixed order, so a (seed, data, config) triple reproduces a
run exactly, including across a checkpoint/resume split.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, zero_grads
from .data import FormatError, SampleRecord, collate_batch
from .evaluate import evaluate
from .model import GroundingModel, ModelConfig

__all__ = [
    "TrainConfig",
    "AdamState",
    "StepMetrics",
    "Checkpoint",
    "FitResult",
    "clip_global_norm",
    "adam_step",
    "train_step",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "LAST_CHECKPOINT",
    "BEST_CHECKPOINT",
]

GCKP_MAGIC = b"GCKP"
GCKP_VERSION = 1
_GCKP_HEADER = struct.Struct("<4sBI")

LAST_CHECKPOINT = "last.gckp"
BEST_CHECKPOINT = "best.gckp"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol. `batch_size` is the effective batch;
    each optimizer step accumulates `accumulation_steps` micro-batches
    of `batch_size // accumulation_steps` samples."""

    learning_rate: float = 5e-5
    clip_norm: float = 0.25
    batch_size: int = 256
    accumulation_steps: int = 2
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    dropout_p: float = 0.4

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if self.batch_size < 1 or self.accumulation_steps < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, accumulation_steps and max_epochs must be positive")
        if self.batch_size % self.accumulation_steps != 0:
            raise ValueError(
                f"batch_size {self.batch_size} not divisible by "
                f"accumulation_steps {self.accumulation_steps}"
            )
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def micro_batch_size(self) -> int:
        return self.batch_size // self.accumulation_steps

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "clip_norm": self.clip_norm,
            "batch_size": self.batch_size,
            "micro_batch_size": self.micro_batch_size,
            "accumulation_steps": self.accumulation_steps,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("micro_batch_size", None)  # derived field
        return cls(**d)


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter map."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, named_params: dict[str, Tensor], beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.values) for n, t in named_params.items()},
            v={n: np.zeros_like(t.values) for n, t in named_params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )


@dataclass
class StepMetrics:
    loss: float       # mean of the micro-batch losses
    grad_norm: float  # global L2 norm before clipping


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float
                     ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most
    `max_norm`; direction is never changed. Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}, norm


def adam_step(named_params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    for name, p in named_params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {p.shape}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
        if not np.isfinite(update).all():
            raise NonFiniteError(f"non-finite Adam update for parameter {name!r}")
        p.values -= update.astype(p.dtype)
    return state


def train_step(micro_batches, model: GroundingModel, state: AdamState,
               cfg: TrainConfig, rng: np.random.Generator) -> StepMetrics:
    """Accumulate gradients over the group, average, clip, and update.

    Gradients are summed over the micro-batches and divided by the group
    size (normally `cfg.accumulation_steps`; the trailing group of an
    epoch may be smaller)."""
    micro_batches = list(micro_batches)
    if not micro_batches:
        raise ValueError("train_step needs at least one micro-batch")
    named = model.named_parameters()
    zero_grads(named.values())
    losses = []
    for mb in micro_batches:
        loss, _ = model.batch_loss(mb, training=True, rng=rng)
        backward(loss)
        losses.append(loss.item())
    scale = 1.0 / len(micro_batches)
    grads = {
        n: (np.zeros_like(t.values) if t.grad is None else t.grad * scale)
        for n, t in named.items()
    }
    clipped, norm = clip_global_norm(grads, cfg.clip_norm)
    adam_step(named, clipped, state, cfg.learning_rate)
    zero_grads(named.values())
    return StepMetrics(loss=float(np.mean(losses)), grad_norm=norm)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to evaluate (params + config) or resume
    (plus optimizer and rng state)."""

    params: dict[str, np.ndarray]   # float32 payloads, fixed order
    config: dict
    epoch: int
    best_metric: float
    best_epoch: int
    optimizer: Optional[AdamState] = None
    rng_state: Optional[dict] = None
    history: list[dict] = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, version, length-prefixed JSON manifest
    (config, progress, rng state, tensor directory), then the float32
    payloads back to back. Offsets are bytes from the payload start."""
    tensors: list[tuple[str, np.ndarray]] = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        tensors += [(f"adam.m.{n}", a) for n, a in ckpt.optimizer.m.items()]
        tensors += [(f"adam.v.{n}", a) for n, a in ckpt.optimizer.v.items()]
    directory = []
    offset = 0
    blobs: list[bytes] = []
    for name, arr in tensors:
        if arr.dtype != np.float32:
            raise ValueError(
                f"checkpoint payloads must be float32, {name!r} is {arr.dtype}"
            )
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "optimizer": None if ckpt.optimizer is None else {
            "step": ckpt.optimizer.step,
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
        },
        "tensors": directory,
    }
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_GCKP_HEADER.pack(GCKP_MAGIC, GCKP_VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _GCKP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, manifest_len = _GCKP_HEADER.unpack_from(blob)
    if magic != GCKP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GCKP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _GCKP_HEADER.size
    if len(blob) < start + manifest_len:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[start:start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest: {exc}") from exc
    payload = blob[start + manifest_len:]

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + count * 4
        if hi > len(payload):
            raise FormatError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload[lo:hi], dtype="<f4").reshape(shape).copy()

    params = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
    optimizer = None
    if manifest.get("optimizer") is not None:
        opt = manifest["optimizer"]
        optimizer = AdamState(
            m={n[len("adam.m."):]: a for n, a in arrays.items() if n.startswith("adam.m.")},
            v={n[len("adam.v."):]: a for n, a in arrays.items() if n.startswith("adam.v.")},
            step=opt["step"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
        )
    return Checkpoint(
        params=params,
        config=manifest["config"],
        epoch=manifest["epoch"],
        best_metric=manifest["best_metric"],
        best_epoch=manifest["best_epoch"],
        optimizer=optimizer,
        rng_state=manifest.get("rng_state"),
        history=manifest.get("history", []),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> GroundingModel:
    """Rebuild a model from a checkpoint's config snapshot and parameters."""
    config = ModelConfig.from_dict(ckpt.config["model"])
    model = GroundingModel.initialize(config, seed=0, dtype=np.float32)
    _restore_params(model, ckpt.params)
    return model


def _restore_params(model: GroundingModel, params: dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    if set(named) != set(params):
        missing = set(named) ^ set(params)
        raise ValueError(f"checkpoint parameter names do not match the model: {sorted(missing)}")
    for name, tensor in named.items():
        arr = params[name]
        if arr.shape != tensor.shape:
            raise ValueError(
                f"checkpoint shape {arr.shape} does not match {name!r} {tensor.shape}"
            )
        tensor.values = arr.astype(tensor.dtype).copy()
        tensor.grad = None


def _snapshot_params(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: t.values.copy() for n, t in named.items()}


# -- the fit loop -----------------------------------------------------------------


@dataclass
class FitResult:
    best: Checkpoint
    history: list[dict]


def fit(model: GroundingModel, train_records: list[SampleRecord],
        dev_records: list[SampleRecord], cfg: TrainConfig,
        checkpoint_dir=None, resume: bool = False,
        log=None) -> FitResult:
    """Train with seeded shuffling and per-epoch dev evaluation; keep the
    checkpoint with the best dev recall@1 and stop after `patience`
    epochs without improvement.

    With `checkpoint_dir`, every epoch rewrites `last.gckp` (full resume
    state) and `best.gckp` (best parameters so far); `resume=True` picks
    up from those files and reproduces the uninterrupted run exactly.
    """
    if not train_records or not dev_records:
        raise ValueError("train and dev sets must be non-empty")
    named = model.named_parameters()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(named)
    config_snapshot = {"model": model.config.to_dict(), "train": cfg.to_dict()}
    history: list[dict] = []
    best_metric = -math.inf
    best_epoch = -1
    best_params = _snapshot_params(named)
    start_epoch = 0

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume requires a checkpoint_dir")
        last = load_checkpoint(checkpoint_dir / LAST_CHECKPOINT)
        _restore_params(model, last.params)
        if last.optimizer is None or last.rng_state is None:
            raise ValueError("checkpoint lacks optimizer/rng state; cannot resume")
        state = last.optimizer
        rng.bit_generator.state = last.rng_state
        history = list(last.history)
        best_metric = last.best_metric
        best_epoch = last.best_epoch
        best_params = load_checkpoint(checkpoint_dir / BEST_CHECKPOINT).params
        start_epoch = last.epoch + 1

    micro = cfg.micro_batch_size
    for epoch in range(start_epoch, cfg.max_epochs):
        order = rng.permutation(len(train_records))
        micro_batches = [
            collate_batch([train_records[i] for i in order[lo:lo + micro]])
            for lo in range(0, len(train_records), micro)
        ]
        step_losses = []
        for lo in range(0, len(micro_batches), cfg.accumulation_steps):
            group = micro_batches[lo:lo + cfg.accumulation_steps]
            metrics = train_step(group, model, state, cfg, rng)
            step_losses.append(metrics.loss)
        train_loss = float(np.mean(step_losses))

        report = evaluate(model, dev_records, split="dev")
        dev_r1 = report.recall_at_1
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "dev_recall_at_1": dev_r1})
        if log is not None:
            log(f"epoch {epoch}: train_loss={train_loss:.6f} dev_R@1={dev_r1:.2f}")

        if dev_r1 > best_metric:
            best_metric = dev_r1
            best_epoch = epoch
            best_params = _snapshot_params(named)

        if checkpoint_dir is not None:
            save_checkpoint(Checkpoint(
                params=_snapshot_params(named), config=config_snapshot,
                epoch=epoch, best_metric=best_metric, best_epoch=best_epoch,
                optimizer=state, rng_state=rng.bit_generator.state,
                history=history,
            ), checkpoint_dir / LAST_CHECKPOINT)
            save_checkpoint(Checkpoint(
                params=best_params, config=config_snapshot,
                epoch=best_epoch, best_metric=best_metric, best_epoch=best_epoch,
                history=history,
            ), checkpoint_dir / BEST_CHECKPOINT)

        if epoch - best_epoch > cfg.patience:
            break

    best = Checkpoint(
        params=best_params, config=config_snapshot, epoch=best_epoch,
        best_metric=best_metric, best_epoch=best_epoch, history=history,
    )
    return FitResult(best=best, history=history)
