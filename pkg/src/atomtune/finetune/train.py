"""Training loop and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ..data import Dataset
from .model import Model, cross_entropy
from .optim import Adam, constant_schedule, cosine_schedule
from .schemes import Partition, TuningScheme, freeze_partition

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "adamw"
    schedule: str = "constant"  # "constant" | "cosine"
    warmup_epochs: int = 0
    tune_bias: bool = False
    tune_norm: bool = False
    eval_every: int = 1  # epochs between evaluations; 0 evaluates only after the last epoch

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_accuracy: Optional[float] = None
    eval_loss: Optional[float] = None
    lr: float = 0.0


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    partition: Optional[Partition] = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """``(accuracy, mean loss)``; ties in the argmax go to the lowest class index."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    total_loss = 0.0
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        logits = model.predict(x)
        loss, _ = cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(data), total_loss / len(data)


def train(model: Model, data: Dataset, scheme: TuningScheme, cfg: TrainConfig,
          eval_data: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[EpochRecord, Model], None]] = None) -> History:
    """Fine-tune the tunable set of ``scheme`` in place; everything else stays bitwise fixed."""
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    partition = freeze_partition(model, scheme, cfg.tune_bias, cfg.tune_norm)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
               decoupled=cfg.optimizer == "adamw")
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    if cfg.schedule == "cosine":
        lr_at = cosine_schedule(cfg.learning_rate, cfg.epochs * steps_per_epoch,
                                cfg.warmup_epochs * steps_per_epoch)
    else:
        lr_at = constant_schedule(cfg.learning_rate)
    history = History(partition=partition)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        loss_sum, correct = 0.0, 0
        lr = cfg.learning_rate
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            logits, caches = model.forward(x)
            loss, g = cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = model.backward(g, caches)
            lr = lr_at(step)
            if lr != 0.0:
                opt.step(model, grads, lr)
            step += 1
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
        rec = EpochRecord(epoch, loss_sum / len(data), correct / len(data), lr=lr)
        due = cfg.eval_every and epoch % cfg.eval_every == 0
        if eval_data is not None and (due or epoch == cfg.epochs):
            rec.eval_accuracy, rec.eval_loss = evaluate(model, eval_data)
        history.records.append(rec)
        log.info("epoch %d loss %.4f acc %.3f eval %s", epoch, rec.train_loss,
                 rec.train_accuracy, rec.eval_accuracy)
        if on_epoch is not None:
            on_epoch(rec, model)
    return history
