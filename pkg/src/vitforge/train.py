"""Optimization loop: Adam with decoupled weight decay, categorical
cross-entropy, deterministic epoch batching, early stopping with
best-weight restoration, and per-epoch metric records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import metrics as MT
from . import model as M
from . import tensor as T
from .tensor import GradTape, Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "EpochRecord",
    "EarlyStopping",
    "ResumeState",
    "DivergenceError",
    "cross_entropy",
    "adam_step",
    "train",
    "evaluate",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite quantity. Carries the most recent
    healthy parameters as ``last_good_params`` when available."""

    def __init__(self, message, last_good_params=None):
        super().__init__(message)
        self.last_good_params = last_good_params


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-6
    early_stop_metric: str = "val_loss"  # or "val_accuracy"
    grad_clip_norm: float = 0.0  # 0 disables clipping
    micro_batch_size: int = 64  # execution chunking only; 0 = whole batch
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise ValueError("weight_decay and grad_clip_norm must be nonnegative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.micro_batch_size < 0:
            raise ValueError("micro_batch_size must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.early_stop_metric not in ("val_loss", "val_accuracy"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")


class OptimizerState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    val_precision_macro: float
    val_recall_macro: float

    def __post_init__(self):
        if not (math.isfinite(self.train_loss) and math.isfinite(self.val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {self.epoch}")
        for name in ("train_acc", "val_acc", "val_precision_macro", "val_recall_macro"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy over the batch (stable fused form)."""
    return T.softmax_cross_entropy(logits, labels)


def _clip_gradients(params: dict[str, Tensor], max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor


def adam_step(params: dict[str, Tensor], state: OptimizerState,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update from each parameter's ``grad``.

    Weight decay is decoupled: p <- p - lr*wd*p happens before the Adam
    delta. Gradients are left zeroed afterwards.
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr, wd, eps = cfg.learning_rate, cfg.weight_decay, cfg.adam_eps
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if wd:
            p.data -= lr * wd * p.data
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / corr2)
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= lr / corr1
        p.data -= denom
        p.zero_grad()


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}


class EarlyStopping:
    """Track the best monitored value; request a stop once the current
    epoch exceeds the best epoch by more than ``patience``."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-6,
                 mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.patience = patience
        self.min_delta = min_delta
        self.mode = mode
        self.best_value = math.inf if mode == "min" else -math.inf
        self.best_epoch = 0
        self.best_params: dict[str, Tensor] | None = None

    def update(self, epoch: int, value: float, params: dict[str, Tensor]) -> bool:
        if self.mode == "min":
            improved = value < self.best_value - self.min_delta
        else:
            improved = value > self.best_value + self.min_delta
        if improved:
            self.best_value = value
            self.best_epoch = epoch
            self.best_params = _snapshot(params)
        return epoch - self.best_epoch > self.patience


@dataclass
class ResumeState:
    """Loop position and early-stopper history for continuing a run
    bit-exactly (pass the restored optimizer separately)."""

    start_epoch: int
    best_epoch: int = 0
    best_value: float = math.inf
    best_params: dict[str, Tensor] | None = None


def train(params: dict[str, Tensor], vit_cfg: M.ViTConfig, cfg: TrainConfig,
          train_ds: D.Dataset, val_ds: D.Dataset,
          augment_spec: D.AugmentSpec | None = None,
          eval_fn=None, callback=None,
          optimizer_state: OptimizerState | None = None,
          resume: ResumeState | None = None):
    """Run the optimization loop.

    Returns ``(best_params, records, stop_reason)`` where ``best_params``
    are the weights from the best monitored epoch and ``stop_reason`` is
    one of ``"max_epochs"``, ``"early_stopping"``, ``"callback"``.

    ``eval_fn(params, dataset, vit_cfg, batch_size)`` defaults to
    :func:`evaluate` and exists so tests can script the validation metric.
    ``callback(record)`` runs after each epoch; returning False stops
    training. Per-epoch RNG streams are derived from ``(seed, epoch)``, so
    a run is a pure function of its config and a resumed run continues the
    exact stream of the uninterrupted one.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise D.DataError("train and validation datasets must be nonempty")
    if train_ds.class_map != val_ds.class_map:
        raise D.DataError("train and validation class maps differ")
    if eval_fn is None:
        eval_fn = evaluate

    state = optimizer_state if optimizer_state is not None else OptimizerState(params)
    stopper = EarlyStopping(
        cfg.early_stop_patience,
        cfg.early_stop_min_delta,
        mode="min" if cfg.early_stop_metric == "val_loss" else "max",
    )
    first_epoch = 1
    if resume is not None:
        first_epoch = resume.start_epoch
        stopper.best_epoch = resume.best_epoch
        stopper.best_params = resume.best_params
        if math.isfinite(resume.best_value):
            stopper.best_value = resume.best_value
    records: list[EpochRecord] = []
    stop_reason = "max_epochs"

    for epoch in range(first_epoch, cfg.max_epochs + 1):
        dropout_rng = np.random.default_rng([cfg.seed, 7919, epoch])
        loss_sum = 0.0
        correct = 0
        seen = 0
        for images, labels in D.batch_iter(
            train_ds, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch,
            augment_spec=augment_spec,
        ):
            b = images.shape[0]
            micro = cfg.micro_batch_size or b
            # one optimizer step per batch; gradients accumulate over
            # micro-slices (backward seeded by each slice's weight in the
            # batch mean) so the update equals the whole-batch gradient
            for start in range(0, b, micro):
                image_slice = Tensor(images.data[start:start + micro])
                label_slice = labels.data[start:start + micro]
                mb = image_slice.shape[0]
                with GradTape() as tape:
                    logits = M.forward(image_slice, params, vit_cfg,
                                       training=True, rng=dropout_rng)
                    loss = cross_entropy(logits, label_slice)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise DivergenceError(
                        f"non-finite training loss at epoch {epoch}",
                        last_good_params=stopper.best_params,
                    )
                preds = logits.data.argmax(axis=1)
                tape.backward(loss, seed=np.asarray(mb / b, dtype=loss.dtype))
                loss_sum += loss_value * mb
                correct += int((preds == label_slice).sum())
                seen += mb
            if cfg.grad_clip_norm > 0:
                _clip_gradients(params, cfg.grad_clip_norm)
            adam_step(params, state, cfg)
        assert seen == len(train_ds), "epoch must cover every sample exactly once"

        val_loss, val_cm = eval_fn(params, val_ds, vit_cfg, cfg.batch_size)
        val_report = MT.report(val_cm, "val")
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=correct / seen,
            val_loss=float(val_loss),
            val_acc=val_report.accuracy,
            val_precision_macro=val_report.macro_precision,
            val_recall_macro=val_report.macro_recall,
        )
        records.append(record)

        monitored = record.val_loss if cfg.early_stop_metric == "val_loss" \
            else record.val_acc
        should_stop = stopper.update(epoch, monitored, params)
        if callback is not None and callback(record) is False:
            stop_reason = "callback"
            break
        if should_stop:
            stop_reason = "early_stopping"
            break

    best = stopper.best_params if stopper.best_params is not None else _snapshot(params)
    return best, records, stop_reason


def evaluate(params: dict[str, Tensor], dataset: D.Dataset,
             vit_cfg: M.ViTConfig, batch_size: int = 256):
    """Eval-mode loss and confusion matrix over a dataset.

    The confusion matrix is independent of how the dataset is partitioned
    into batches.
    """
    if len(dataset) == 0:
        raise D.DataError("cannot evaluate an empty dataset")
    k = len(dataset.class_map)
    counts = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    seen = 0
    for images, labels in D.batch_iter(dataset, batch_size):
        logits = M.forward(images, params, vit_cfg, training=False)
        loss = cross_entropy(logits, labels)
        preds = logits.data.argmax(axis=1)
        np.add.at(counts, (labels.data, preds), 1)
        loss_sum += float(loss.data) * images.shape[0]
        seen += images.shape[0]
    cm = MT.ConfusionMatrix(counts, dataset.class_map.names)
    return loss_sum / seen, cm
