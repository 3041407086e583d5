"""End-to-end multiplexed inference and the training loops.

The composite forward runs each slot through the first ``l`` encoder layers
on its own, projects down, mixes the group into one sequence of d-dim states,
runs the remaining layers once, then unmixes and classifies per slot.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import RevMuxAdapters
from .backbone import ConfigError, EncoderModel
from .data import ArrayDataset
from .objectives import LossBreakdown, combined_loss
from .optim import Adam
from .tensor import Tensor, no_grad

LOG_COLUMNS = ("step", "epoch", "ce", "infonce", "total", "acc")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; message carries diagnostics."""


@dataclass
class CompositeBatch:
    """A batch of G groups, each packing one instance per slot."""

    tokens: np.ndarray  # [N, G, T] int32
    masks: np.ndarray  # [N, G, T] float32
    labels: np.ndarray  # [N, G] int64
    indices: np.ndarray  # [N, G] positions in the source dataset
    prefill_layers: int

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def groups(self) -> int:
        return self.tokens.shape[1]


@dataclass
class TrainConfig:
    n_inputs: int = 2
    prefill_layers: int = 2
    infonce_weight: float = 0.5
    mode: str = "fe"
    lr: float = 1e-3
    backbone_lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 10
    groups_per_batch: int = 8
    seed: int = 0
    temperature: float = 1.0
    patience: int = 3
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.mode not in ("fe", "ft"):
            raise ConfigError(f"mode must be 'fe' or 'ft', got {self.mode!r}")
        if self.n_inputs < 1:
            raise ConfigError(f"n_inputs must be >= 1, got {self.n_inputs}")
        if self.infonce_weight < 0:
            raise ConfigError("infonce_weight must be >= 0")
        if self.epochs < 1 or self.groups_per_batch < 1:
            raise ConfigError("epochs and groups_per_batch must be >= 1")


@dataclass
class TrainResult:
    rows: list[dict]
    best_accuracy: float | None
    best_epoch: int | None
    epochs_run: int
    stopped_early: bool = False


def form_groups(count: int, n: int, rng) -> np.ndarray:
    """Seeded shuffle into consecutive chunks of n; the remainder is dropped."""
    if count < n:
        raise ConfigError(f"need at least {n} examples to form a group, got {count}")
    perm = rng.permutation(count)
    usable = (count // n) * n
    return perm[:usable].reshape(-1, n)


def build_composite_batch(data: ArrayDataset, group_rows: np.ndarray, prefill_layers: int) -> CompositeBatch:
    """Assemble slot-major arrays from [G, N] index rows."""
    idx = np.asarray(group_rows)
    if idx.ndim != 2:
        raise ConfigError("group_rows must be a [G, N] index array")
    slots = idx.T  # [N, G]
    return CompositeBatch(
        tokens=data.tokens[slots],
        masks=data.masks[slots],
        labels=data.labels[slots],
        indices=slots.copy(),
        prefill_layers=prefill_layers,
    )


def revmux_forward(
    batch: CompositeBatch, model: EncoderModel, adapters: RevMuxAdapters | None
) -> tuple[list[Tensor], list[Tensor]]:
    """Per-slot logits and pooled states for one composite batch.

    With one slot the adapters are bypassed entirely and this is plain
    single-input inference.
    """
    l = batch.prefill_layers
    if batch.n == 1:
        h = model.forward_full(batch.tokens[0], batch.masks[0])
        pooled = model.pool(h, batch.masks[0])
        return [model.classify(pooled)], [pooled]
    if adapters is None:
        raise ConfigError("adapters required for multi-slot batches")
    if batch.n != adapters.n:
        raise ConfigError(f"batch has {batch.n} slots but adapters expect {adapters.n}")
    composite_mask = np.maximum.reduce([batch.masks[k] for k in range(batch.n)])
    slots = [
        adapters.down_project(model.forward_prefix(batch.tokens[k], batch.masks[k], l))
        for k in range(batch.n)
    ]
    mixed = adapters.multiplex(slots)
    shared = model.forward_suffix(mixed, composite_mask, l)
    recovered = adapters.demultiplex(shared)
    logits, pooled = [], []
    for k in range(batch.n):
        p = model.pool(adapters.up_project(recovered[k]), batch.masks[k])
        pooled.append(p)
        logits.append(model.classify(p))
    return logits, pooled


def teacher_forward(tokens: np.ndarray, masks: np.ndarray, model: EncoderModel) -> Tensor:
    """Full-depth one-by-one pooled states; dropout off, no gradient."""
    was_training = model.training
    model.eval_mode()
    try:
        with no_grad():
            pooled = model.pool(model.forward_full(tokens, masks), masks)
    finally:
        model.train_mode(was_training)
    return Tensor(pooled.data.copy())


def batch_accuracy(logits_per_slot: list[Tensor], labels: np.ndarray) -> float:
    """Fraction correct over every slot of every group."""
    correct = total = 0
    for k, logits in enumerate(logits_per_slot):
        pred = np.argmax(logits.data, axis=-1)
        correct += int(np.sum(pred == labels[k]))
        total += pred.shape[0]
    return correct / total


def quick_eval(
    model: EncoderModel,
    adapters: RevMuxAdapters | None,
    data: ArrayDataset,
    n: int,
    prefill_layers: int,
    seed: int = 0,
    batch_groups: int = 32,
) -> float:
    """Single-round grouped accuracy used for early stopping."""
    rng = np.random.default_rng(seed)
    rows = form_groups(len(data), n, rng)
    was_training = model.training
    model.eval_mode()
    try:
        correct = total = 0
        for start in range(0, rows.shape[0], batch_groups):
            batch = build_composite_batch(data, rows[start : start + batch_groups], prefill_layers)
            with no_grad():
                logits, _ = revmux_forward(batch, model, adapters)
            for k, lg in enumerate(logits):
                correct += int(np.sum(np.argmax(lg.data, axis=-1) == batch.labels[k]))
                total += lg.shape[0]
        return correct / total
    finally:
        model.train_mode(was_training)


def write_log(rows: list[dict], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.data = snap[name].copy()


def _check_finite(loss: LossBreakdown, step: int, lr: float, grad_norm: float) -> None:
    total = float(loss.total.data)
    if not np.isfinite(total) or not np.isfinite(grad_norm):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: total={total}, lr={lr:.3g}, grad_norm={grad_norm:.3g}"
        )


def train_adapters(
    model: EncoderModel,
    adapters: RevMuxAdapters,
    train_data: ArrayDataset,
    eval_data: ArrayDataset | None,
    cfg: TrainConfig,
    log_path: str | None = None,
    eval_fn=None,
) -> TrainResult:
    """Joint cross-entropy + InfoNCE training of the adapter stack.

    FE mode freezes every backbone parameter (classifier head included) and
    runs the backbone deterministically; FT mode also updates the backbone at
    its own smaller step size.
    """
    if cfg.n_inputs != adapters.n:
        raise ConfigError(f"config n_inputs={cfg.n_inputs} but adapters expect {adapters.n}")
    model.cfg.check_divisible(adapters.n)
    frozen = cfg.mode == "fe"
    model.set_frozen(frozen)
    model.train_mode(not frozen)
    backbone_params = model.named_parameters()

    groups_per_epoch = len(train_data) // cfg.n_inputs
    steps_per_epoch = max(1, int(np.ceil(groups_per_epoch / cfg.groups_per_batch)))
    total_steps = steps_per_epoch * cfg.epochs
    optimizers = [
        Adam(
            adapters.trainable_parameters(),
            lr=cfg.lr,
            betas=cfg.betas,
            weight_decay=cfg.weight_decay,
            warmup_frac=cfg.warmup_frac,
            total_steps=total_steps,
        )
    ]
    if not frozen:
        optimizers.append(
            Adam(
                {n: p for n, p in backbone_params.items() if p.requires_grad},
                lr=cfg.backbone_lr,
                betas=cfg.betas,
                weight_decay=cfg.weight_decay,
                warmup_frac=cfg.warmup_frac,
                total_steps=total_steps,
            )
        )

    if eval_fn is None and eval_data is not None:
        def eval_fn(m, a):
            return quick_eval(m, a, eval_data, cfg.n_inputs, cfg.prefill_layers, seed=cfg.seed)

    rows: list[dict] = []
    step = 0
    best_acc = None
    best_epoch = None
    best_state = None
    stale = 0
    stopped_early = False
    epochs_run = 0
    trainable = adapters.trainable_parameters()

    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        group_rows = form_groups(len(train_data), cfg.n_inputs, epoch_rng)
        for start in range(0, group_rows.shape[0], cfg.groups_per_batch):
            batch = build_composite_batch(
                train_data, group_rows[start : start + cfg.groups_per_batch], cfg.prefill_layers
            )
            teacher_slots = [
                teacher_forward(batch.tokens[k], batch.masks[k], model) for k in range(batch.n)
            ]
            teacher = Tensor(np.stack([t.data for t in teacher_slots], axis=1))
            with T.GradTape() as tape:
                logits, pooled = revmux_forward(batch, model, adapters)
                student = T.reshape(
                    T.concat_last_dim(pooled), (batch.groups, batch.n, model.cfg.d_model)
                )
                loss = combined_loss(
                    logits,
                    [batch.labels[k] for k in range(batch.n)],
                    student,
                    teacher,
                    weight=cfg.infonce_weight,
                    temperature=cfg.temperature,
                )
                tape.backward(loss.total)
            step += 1
            grad_norm = float(np.sqrt(sum(o.grad_norm() ** 2 for o in optimizers)))
            _check_finite(loss, step, optimizers[0].current_lr(), grad_norm)
            if frozen:
                leaked = [n for n, p in backbone_params.items() if p.grad is not None]
                if leaked:
                    raise AssertionError(f"frozen backbone received gradients: {leaked[:3]}")
            for opt in optimizers:
                opt.step()
                opt.zero_grad()
            rows.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "ce": float(loss.ce.data),
                    "infonce": float(loss.infonce.data),
                    "total": float(loss.total.data),
                    "acc": batch_accuracy(logits, batch.labels),
                }
            )
        epochs_run = epoch + 1
        if eval_fn is not None:
            acc = eval_fn(model, adapters)
            if best_acc is None or acc > best_acc:
                best_acc, best_epoch, stale = acc, epoch, 0
                best_state = _snapshot(trainable)
                if not frozen:
                    best_state.update(_snapshot(backbone_params))
            else:
                stale += 1
                if stale >= cfg.patience:
                    stopped_early = True
                    break

    if best_state is not None:
        _restore(trainable, {k: v for k, v in best_state.items() if k in trainable})
        if not frozen:
            _restore(backbone_params, {k: v for k, v in best_state.items() if k in backbone_params})
    model.eval_mode()
    if log_path:
        write_log(rows, log_path)
    return TrainResult(rows, best_acc, best_epoch, epochs_run, stopped_early)


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    patience: int = 3
    warmup_frac: float = 0.05


def plain_accuracy(model: EncoderModel, data: ArrayDataset, batch_size: int = 64) -> float:
    """Single-input eval accuracy over a tokenized split."""
    was_training = model.training
    model.eval_mode()
    try:
        correct = 0
        for start in range(0, len(data), batch_size):
            tokens = data.tokens[start : start + batch_size]
            masks = data.masks[start : start + batch_size]
            with no_grad():
                logits = model.pool_and_classify(model.forward_full(tokens, masks), masks)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == data.labels[start : start + batch_size]))
        return correct / len(data)
    finally:
        model.train_mode(was_training)


def train_backbone(
    model: EncoderModel,
    train_data: ArrayDataset,
    eval_data: ArrayDataset | None,
    cfg: PretrainConfig,
    log_path: str | None = None,
) -> TrainResult:
    """Supervised pretraining of the encoder and classifier head."""
    model.set_frozen(False)
    model.train_mode(True)
    params = model.named_parameters()
    steps_per_epoch = max(1, int(np.ceil(len(train_data) / cfg.batch_size)))
    opt = Adam(
        params,
        lr=cfg.lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
        warmup_frac=cfg.warmup_frac,
        total_steps=steps_per_epoch * cfg.epochs,
    )
    rows: list[dict] = []
    step = 0
    best_acc = None
    best_epoch = None
    best_state = None
    stale = 0
    stopped_early = False
    epochs_run = 0

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(cfg.seed * 99991 + epoch)
        order = rng.permutation(len(train_data))
        model.train_mode(True)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tokens, masks, labels = train_data.tokens[idx], train_data.masks[idx], train_data.labels[idx]
            with T.GradTape() as tape:
                logits = model.pool_and_classify(model.forward_full(tokens, masks), masks)
                ce = T.softmax_cross_entropy(logits, labels)
                tape.backward(ce)
            step += 1
            grad_norm = opt.grad_norm()
            ce_val = float(ce.data)
            if not np.isfinite(ce_val) or not np.isfinite(grad_norm):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: total={ce_val}, "
                    f"lr={opt.current_lr():.3g}, grad_norm={grad_norm:.3g}"
                )
            acc = float(np.mean(np.argmax(logits.data, axis=-1) == labels))
            opt.step()
            opt.zero_grad()
            rows.append(
                {"step": step, "epoch": epoch, "ce": ce_val, "infonce": 0.0, "total": ce_val, "acc": acc}
            )
        epochs_run = epoch + 1
        if eval_data is not None:
            acc = plain_accuracy(model, eval_data)
            if best_acc is None or acc > best_acc:
                best_acc, best_epoch, stale = acc, epoch, 0
                best_state = _snapshot(params)
            else:
                stale += 1
                if stale >= cfg.patience:
                    stopped_early = True
                    break

    if best_state is not None:
        _restore(params, best_state)
    model.eval_mode()
    if log_path:
        write_log(rows, log_path)
    return TrainResult(rows, best_acc, best_epoch, epochs_run, stopped_early)
