"""Training loop: masked per-task MSE, ADAM, early stopping on the
validation monitor (MOS PCC minus MOS RMSE), and learning-rate patience
with halving. The shuffle permutation for each epoch is derived from
(seed, epoch) only, so runs are reproducible batch for batch.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .evaluation import UndefinedCorrelationError, pearson, rmse
from .quality import SCORE_MAX, SCORE_MIN, TASKS


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 500
    early_stop_patience: int = 20
    lr_patience: int = 15
    batch_size: int = 100
    seed: int = 0
    lr_factor: float = 0.5
    lr_floor: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.early_stop_patience < 1 or self.lr_patience < 1:
            raise TrainingError("patience values must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")


def mse_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked-in entries only."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise TrainingError(
            f"length mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("mse_loss needs at least one masked-in entry")
    diff = (pred - Tensor(np.where(mask, target, 0.0))) * Tensor(mask.astype(np.float64))
    return (diff * diff).sum() * (1.0 / count)


class Adam:
    """Standard ADAM (beta1=0.9, beta2=0.999, eps=1e-8, bias correction)."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict[str, Tensor], optimizer: Adam, lr: float) -> None:
    """Functional wrapper: apply one ADAM update using gradients already
    accumulated in the parameter tensors."""
    if optimizer.params is not params:
        raise TrainingError("optimizer was built for a different parameter set")
    optimizer.step(lr)


class PatienceController:
    """Early-stop and LR-patience bookkeeping as a pure function of the
    monitor sequence. Improvement means strictly greater than the best."""

    def __init__(self, early_stop_patience: int, lr_patience: int):
        self.early_stop_patience = early_stop_patience
        self.lr_patience = lr_patience
        self.best = -np.inf
        self.best_epoch = 0
        self._since_improve = 0
        self._since_lr = 0

    def update(self, monitor: float, epoch: int) -> tuple[bool, bool]:
        """Feed one epoch's monitor value; returns (stop, halve_lr)."""
        if monitor > self.best:
            self.best = monitor
            self.best_epoch = epoch
            self._since_improve = 0
            self._since_lr = 0
            return False, False
        self._since_improve += 1
        self._since_lr += 1
        halve = False
        if self._since_lr >= self.lr_patience:
            halve = True
            self._since_lr = 0
        return self._since_improve >= self.early_stop_patience, halve


@dataclass
class TrainSample:
    inputs: object  # model-specific, produced by model.prepare()
    labels: np.ndarray  # (5,) float, NaN where absent
    label_mask: np.ndarray  # (5,) bool


def make_sample(inputs, scores) -> TrainSample:
    labels = np.array(
        [scores.get(t) if scores.present(t) else np.nan for t in TASKS], dtype=np.float64
    )
    return TrainSample(inputs=inputs, labels=labels, label_mask=~np.isnan(labels))


@dataclass
class EpochRecord:
    epoch: int
    task_losses: dict[str, float]
    val_pcc_mos: float
    val_rmse_mos: float
    lr: float
    monitor: float


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    best_monitor: float
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _batch_losses(model, samples: list[TrainSample]) -> tuple[Tensor | None, dict[str, float]]:
    batch = model.collate([s.inputs for s in samples])
    preds = model.forward_batch(batch)
    labels = np.stack([s.labels for s in samples])
    masks = np.stack([s.label_mask for s in samples])
    total = None
    per_task: dict[str, float] = {}
    for i, task in enumerate(TASKS):
        if not masks[:, i].any():
            continue  # no labels for this task in the batch: skipped, no gradient
        loss = mse_loss(preds[task], np.where(masks[:, i], labels[:, i], 0.0), masks[:, i])
        per_task[task] = float(loss.data)
        total = loss if total is None else total + loss
    return total, per_task


def _validation_mos(model, samples: list[TrainSample]) -> tuple[float, float, float]:
    """Clipped MOS predictions vs labels; returns (pcc, rmse, monitor).
    An undefined correlation is recorded as the worst monitor value."""
    batch = model.collate([s.inputs for s in samples])
    preds = model.forward_batch(batch)
    mos_idx = TASKS.index("mos")
    have = np.array([s.label_mask[mos_idx] for s in samples])
    if not have.any():
        raise TrainingError("validation set has no MOS labels")
    pred = np.clip(preds["mos"].data[have], SCORE_MIN, SCORE_MAX)
    ref = np.array([s.labels[mos_idx] for s in samples])[have]
    err = rmse(pred, ref)
    try:
        pcc = pearson(pred, ref)
    except UndefinedCorrelationError:
        return float("nan"), err, -np.inf
    return pcc, err, pcc - err


def fit(
    model,
    train_samples: list[TrainSample],
    val_samples: list[TrainSample],
    config: TrainConfig,
    history_path=None,
) -> FitResult:
    """Train until early stopping or max_epochs; returns the checkpoint
    with the best validation monitor and the per-epoch history."""
    if config.max_epochs < 1:
        raise TrainingError("no training performed: max_epochs is 0")
    if not train_samples or not val_samples:
        raise TrainingError("training and validation sets must be non-empty")

    optimizer = Adam(model.params)
    controller = PatienceController(config.early_stop_patience, config.lr_patience)
    lr = config.learning_rate
    history: list[EpochRecord] = []
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    best_epoch, best_monitor = 0, -np.inf
    n = len(train_samples)

    for epoch in range(1, config.max_epochs + 1):
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for start in range(0, n, config.batch_size):
            chunk = [train_samples[i] for i in perm[start : start + config.batch_size]]
            optimizer.zero_grad()
            total, per_task = _batch_losses(model, chunk)
            if total is None:
                continue
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total.backward()
            optimizer.step(lr)
            for task, value in per_task.items():
                sums[task] = sums.get(task, 0.0) + value
                counts[task] = counts.get(task, 0) + 1

        pcc, err, monitor = _validation_mos(model, val_samples)
        if monitor > best_monitor:
            best_monitor = monitor
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        history.append(
            EpochRecord(
                epoch=epoch,
                task_losses={t: sums[t] / counts[t] for t in sums},
                val_pcc_mos=pcc,
                val_rmse_mos=err,
                lr=lr,
                monitor=monitor,
            )
        )
        stop, halve = controller.update(monitor, epoch)
        if halve:
            lr = max(lr * config.lr_factor, config.lr_floor)
        if stop:
            break

    if history_path is not None:
        write_history(history_path, history)
    return FitResult(params=best_params, best_epoch=best_epoch, best_monitor=best_monitor, history=history)


def write_history(path, history: list[EpochRecord]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["epoch"]
        + [f"loss_{t}" for t in TASKS]
        + ["val_pcc_mos", "val_rmse_mos", "lr", "monitor"]
    )
    for rec in history:
        writer.writerow(
            [rec.epoch]
            + [f"{rec.task_losses[t]:.10g}" if t in rec.task_losses else "" for t in TASKS]
            + [f"{rec.val_pcc_mos:.10g}", f"{rec.val_rmse_mos:.10g}", f"{rec.lr:.10g}", f"{rec.monitor:.10g}"]
        )
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
