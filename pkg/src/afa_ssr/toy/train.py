"""Training loop, evaluation and metrics logging for the toy pipeline."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .. import tensor as T
from ..losses import composite_segmentation_loss
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .config import ToyConfig
from .data import ToyDataset, boundary_map, gen_dataset
from .metrics import confusion_matrix, evaluate_boundary_f1, miou_from_confusion
from .model import ToyModel

__all__ = [
    "METRICS_HEADER",
    "MetricsRow",
    "TrainResult",
    "TrainingError",
    "SGD",
    "poly_lr",
    "evaluate",
    "train",
    "write_metrics_csv",
    "model_checkpoint",
    "model_from_checkpoint",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "miou", "f1")


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    split: str
    loss: float
    miou: float
    f1: float

    def formatted(self) -> list:
        return [str(self.epoch), self.split, repr(self.loss), repr(self.miou), repr(self.f1)]


@dataclass
class TrainResult:
    model: ToyModel
    rows: List[MetricsRow] = field(default_factory=list)
    checkpoint: Optional[Checkpoint] = None

    def val_miou(self, epoch: int = -1) -> float:
        vals = [r for r in self.rows if r.split == "val"]
        return vals[epoch].miou if epoch < 0 else next(r.miou for r in vals if r.epoch == epoch)


class SGD:
    """SGD with heavy-ball momentum: ``v <- m*v + g``, ``p <- p - lr*v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict) -> None:
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p)
            if g is None:
                continue
            v *= self.momentum
            v += g
            p.data -= np.float32(self.lr) * v


def poly_lr(base: float, epoch: int, epochs: int, power: float = 0.9) -> float:
    return base * (1.0 - epoch / epochs) ** power


def _loss(out, labels):
    return composite_segmentation_loss(out.final, out.per_scale, out.aux_fused, out.heads_fused, labels)


def _f1_of(pred: np.ndarray, boundaries: np.ndarray) -> float:
    return evaluate_boundary_f1(boundary_map(pred), boundaries, threshold=0.5, radius=1)[2]


def evaluate(model: ToyModel, data: ToyDataset, batch_size: int = 32):
    """Mean loss, mIoU and boundary F1 of the SSR-fused prediction on ``data``."""
    k = model.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    total, preds = 0.0, []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            out = model.forward(data.images[sl])
            total += _loss(out, data.labels[sl]).total.item() * len(data.labels[sl])
            pred = out.final.data.argmax(axis=1)
            cm += confusion_matrix(pred, data.labels[sl], k)
            preds.append(pred)
    pred = np.concatenate(preds)
    return total / len(data), miou_from_confusion(cm)[1], _f1_of(pred, data.boundaries)


def model_checkpoint(model: ToyModel, epoch: int) -> Checkpoint:
    cfg = model.config
    return Checkpoint(model.state_dict(), epoch=epoch, seed=cfg.seed, config_digest=cfg.digest())


def model_from_checkpoint(ckpt: Checkpoint, config: ToyConfig) -> ToyModel:
    if ckpt.config_digest != config.digest():
        raise CheckpointError("checkpoint was written for a different configuration (config digest mismatch)")
    model = ToyModel(config)
    model.load_state_dict(ckpt.params)
    return model


def train(
    config: ToyConfig,
    out_dir=None,
    train_data: ToyDataset = None,
    val_data: ToyDataset = None,
    on_row: Callable[[MetricsRow], None] = None,
) -> TrainResult:
    """Train a ToyModel; epoch 0 rows evaluate the untrained model.

    Writes ``model.ckpt`` and ``metrics.csv`` into ``out_dir`` when given.
    """
    train_data = gen_dataset(config, "train") if train_data is None else train_data
    val_data = gen_dataset(config, "val") if val_data is None else val_data
    model = ToyModel(config)
    model.calibrate(train_data.images[: config.batch_size])
    opt = SGD(model.parameters(), config.lr, config.momentum)
    k = config.num_classes
    result = TrainResult(model)

    def emit(row):
        result.rows.append(row)
        log.info("epoch %d %s loss=%.4f miou=%.4f f1=%.4f", row.epoch, row.split, row.loss, row.miou, row.f1)
        if on_row:
            on_row(row)

    loss, miou, f1 = evaluate(model, train_data)
    emit(MetricsRow(0, "train", loss, miou, f1))
    loss, miou, f1 = evaluate(model, val_data)
    emit(MetricsRow(0, "val", loss, miou, f1))

    n = len(train_data)
    for epoch in range(config.epochs):
        opt.lr = poly_lr(config.lr, epoch, config.epochs)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        cm = np.zeros((k, k), dtype=np.int64)
        total, preds = 0.0, np.empty_like(train_data.labels)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            out = model.forward(train_data.images[idx])
            labels = train_data.labels[idx]
            report = _loss(out, labels)
            value = report.total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch + 1}, batch starting {start}: {report.as_floats()}")
            grads = T.backward(report.total)
            opt.step(grads)
            total += value * len(idx)
            pred = out.final.data.argmax(axis=1)
            preds[idx] = pred
            cm += confusion_matrix(pred, labels, k)
        emit(MetricsRow(epoch + 1, "train", total / n, miou_from_confusion(cm)[1], _f1_of(preds, train_data.boundaries)))
        loss, miou, f1 = evaluate(model, val_data)
        emit(MetricsRow(epoch + 1, "val", loss, miou, f1))

    result.checkpoint = model_checkpoint(model, config.epochs)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.checkpoint, out_dir / "model.ckpt")
        write_metrics_csv(result.rows, out_dir / "metrics.csv")
    return result


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow(r.formatted())
