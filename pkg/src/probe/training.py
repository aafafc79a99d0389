"""Loss, training loop with plateau scheduler and early stopping, and
checkpoint persistence.

The loss is class-weighted cross-entropy normalized by sqrt(atom count) so
large molecules do not dominate the gradient. Training keeps the best-
validation parameter snapshot and returns that model, not the last epoch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import LabeledDataset, make_batches
from .errors import ConfigError, DataError, FormatError, TrainingDivergenceError
from .model import ProbeConfig, ProbeModel
from .nn import AdamW, clip_grad_norm, seeded_rng

CHECKPOINT_MAGIC = b"PRBC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    scheduler_factor: float = 0.9
    scheduler_patience: int = 5
    min_lr: float = 5e-6
    early_stop_patience: int = 25
    max_epochs: int = 100
    batch_size: int = 256
    percentile: float = 50.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ConfigError("scheduler_factor must be in (0, 1)")
        if self.min_lr > self.lr:
            raise ConfigError("min_lr must not exceed the initial lr")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigError("max_epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    plateau_count: int = 0
    stopped_early: bool = False
    train_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)


def probe_loss(logits: np.ndarray, labels: np.ndarray, n_atoms: np.ndarray,
               class_weights: tuple[float, float]) -> tuple[float, np.ndarray]:
    """Batch-mean of w_y * CE(softmax(logits), y) / sqrt(N) and its
    gradient w.r.t. the logits (log-sum-exp form, never NaN)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 1:
        raise DataError("labels must be 0 or 1")
    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    logp = logits - lse
    rows = np.arange(b)
    ce = -logp[rows, labels]
    w = np.where(labels == 0, class_weights[0], class_weights[1])
    coef = w / np.sqrt(n_atoms.astype(np.float64))
    loss = float((coef * ce).mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= coef[:, None] / b
    return loss, grad


def scheduler_step(state: TrainState, val_loss: float,
                   config: TrainConfig) -> TrainState:
    """Reduce-on-plateau update: strict improvement resets the counters;
    after more than ``scheduler_patience`` non-improving epochs the lr is
    decayed by ``scheduler_factor`` (floored at min_lr) and the plateau
    counter restarts. The early-stop counter is tracked independently."""
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.plateau_count = 0
        state.epochs_since_improvement = 0
    else:
        state.plateau_count += 1
        state.epochs_since_improvement += 1
        if state.plateau_count > config.scheduler_patience:
            state.lr = max(state.lr * config.scheduler_factor, config.min_lr)
            state.plateau_count = 0
    return state


def dataset_loss(model: ProbeModel, dataset: LabeledDataset,
                 batch_size: int = 256) -> float:
    """Mean weighted loss over a dataset with dropout disabled."""
    was_training = model.training
    model.eval()
    total = 0.0
    for batch in make_batches(dataset, batch_size=batch_size):
        loss, _ = probe_loss(model.forward(batch).logits, batch.labels,
                             batch.n_atoms, dataset.class_weights)
        total += loss * len(batch)
    if was_training:
        model.train()
    return total / len(dataset)


@dataclass
class Checkpoint:
    """Snapshot of a trained model plus the labeling and run metadata."""

    config: ProbeConfig
    params: dict[str, np.ndarray]
    meta: dict


def _fit_scalar_stats(config: ProbeConfig, dataset: LabeledDataset) -> None:
    energies = np.array([r.e_pred for r in dataset.records], dtype=np.float64)
    counts = np.array([r.n_atoms for r in dataset.records], dtype=np.float64)
    config.energy_mean = float(energies.mean())
    config.energy_std = float(energies.std()) or 1.0
    config.natoms_mean = float(counts.mean())
    config.natoms_std = float(counts.std()) or 1.0


def fit(model: ProbeModel, train_set: LabeledDataset, val_set: LabeledDataset,
        config: TrainConfig) -> tuple[ProbeModel, TrainState, Checkpoint]:
    """Run the full training loop and return the best-validation snapshot.

    Each epoch: shuffled batches of forward -> loss -> backward -> clip ->
    AdamW step, then a validation pass (dropout off, training class
    weights). Stops after ``early_stop_patience`` epochs without
    improvement. Deterministic for a fixed seed in single-threaded mode.
    """
    config.validate()
    if train_set.embed_dim != val_set.embed_dim:
        raise DataError("train and validation embedding widths differ")
    if model.config.normalize_scalars:
        _fit_scalar_stats(model.config, train_set)

    params = model.parameters()
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = seeded_rng(config.seed, 0x0EF0)
    model.set_dropout_rng(seeded_rng(config.seed, 0xD0))

    state = TrainState(lr=config.lr)
    best_params = {p.name: p.value.copy() for p in params}

    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        model.train()
        running = 0.0
        batches = make_batches(train_set, config.batch_size, shuffle=True,
                               rng=shuffle_rng)
        for bi, batch in enumerate(batches):
            out = model.forward(batch)
            loss, grad = probe_loss(out.logits, batch.labels, batch.n_atoms,
                                    train_set.class_weights)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {bi}")
            model.zero_grad()
            model.backward(grad)
            clip_grad_norm(params, config.clip_norm)
            optimizer.lr = state.lr
            optimizer.step()
            running += loss * len(batch)
        train_loss = running / len(train_set)
        val_loss = dataset_loss(model, val_set, config.batch_size)
        state.train_history.append(train_loss)
        state.val_history.append(val_loss)

        if val_loss < state.best_val_loss:
            best_params = {p.name: p.value.copy() for p in params}
        scheduler_step(state, val_loss, config)
        state.lr_history.append(state.lr)
        if state.epochs_since_improvement >= config.early_stop_patience:
            state.stopped_early = True
            break

    for p in params:
        p.value[...] = best_params[p.name]
    model.eval()

    meta = {
        "boundary": train_set.boundary,
        "percentile": train_set.percentile,
        "class_weight_0": train_set.class_weights[0],
        "class_weight_1": train_set.class_weights[1],
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_loss": None if state.best_val_loss == float("inf") else state.best_val_loss,
        "final_train_loss": state.train_history[-1] if state.train_history else None,
        "final_val_loss": state.val_history[-1] if state.val_history else None,
        "stopped_early": state.stopped_early,
        "seed": config.seed,
        "tool_version": __version__,
    }
    checkpoint = Checkpoint(config=model.config,
                            params={p.name: p.value.copy() for p in params},
                            meta=meta)
    return model, state, checkpoint


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Serialize a checkpoint: magic, version, a length-prefixed block of
    key=value lines (JSON-encoded values), then raw parameter tensors."""
    lines = []
    for key, value in checkpoint.config.to_dict().items():
        lines.append(f"config.{key}={json.dumps(value)}")
    for key, value in checkpoint.meta.items():
        lines.append(f"meta.{key}={json.dumps(value)}")
    block = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for name, value in checkpoint.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 10 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file", offset=0)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    (block_len,) = struct.unpack_from("<I", buf, 6)
    off = 10
    if off + block_len > len(buf):
        raise FormatError(f"{path}: truncated config block", offset=off)
    config_dict, meta = {}, {}
    for line in buf[off:off + block_len].decode("utf-8").splitlines():
        key, _, raw = line.partition("=")
        value = json.loads(raw)
        if key.startswith("config."):
            config_dict[key[len("config."):]] = value
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = value
    off += block_len

    params = {}
    while off < len(buf):
        try:
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = off + 8 * count
            if end > len(buf):
                raise struct.error
            params[name] = np.frombuffer(buf, dtype="<f8", count=count,
                                         offset=off).reshape(shape).copy()
            off = end
        except struct.error:
            raise FormatError(f"{path}: truncated parameter record", offset=off) from None
    return Checkpoint(config=ProbeConfig.from_dict(config_dict), params=params, meta=meta)


def load_checkpoint(path) -> tuple[ProbeModel, dict]:
    """Rebuild the model from a checkpoint; forward outputs are
    bit-identical to the model that was saved."""
    ckpt = read_checkpoint(path)
    model = ProbeModel(ckpt.config, seed=int(ckpt.meta.get("seed", 0)))
    model_params = {p.name: p for p in model.parameters()}
    if set(model_params) != set(ckpt.params):
        missing = set(model_params) ^ set(ckpt.params)
        raise FormatError(f"{path}: parameter set mismatch: {sorted(missing)[:4]}")
    for name, value in ckpt.params.items():
        p = model_params[name]
        if p.value.shape != value.shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {value.shape}, "
                f"config implies {p.value.shape}")
        p.value[...] = value
    model.eval()
    return model, ckpt.meta
