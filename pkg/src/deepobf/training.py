"""Label-supervised training loop, run logs and shared evaluation helpers."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import ops
from .data import Split, batches
from .errors import DivergenceError
from .graph import ModelGraph
from .optim import SGD, cosine_lr
from .seeding import derive_seed

LOG_COLUMNS = ("epoch", "hint_loss", "task_loss", "train_acc", "test_acc", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")

    def rate(self, step: int, total: int) -> float:
        return cosine_lr(self.lr, step, total) if self.schedule == "cosine" else self.lr


@dataclass
class EpochRecord:
    epoch: int
    hint_loss: float
    task_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch records plus bookkeeping about what the run left untouched."""

    records: List[EpochRecord] = field(default_factory=list)
    label: str = ""
    frozen_digest_before: Optional[str] = None
    frozen_digest_after: Optional[str] = None
    test_hint_loss: float = float("nan")

    def __len__(self):
        return len(self.records)

    @property
    def best_test_acc(self) -> float:
        return max((r.test_acc for r in self.records), default=float("nan"))

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            d = asdict(r)
            w.writerow([d["epoch"]] + [_fmt(d[c]) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = [
            EpochRecord(int(r["epoch"]), *(float(r[c]) for c in LOG_COLUMNS[1:]))
            for r in rows
        ]
        return cls(recs, label)


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def accuracy_of(m: ModelGraph, split: Split, batch_size: int = 256) -> float:
    if len(split) == 0:
        return float("nan")
    return float(np.mean(m.predict(split.images, batch_size) == split.labels))


def _check_finite(value: float, what: str, epoch: int, batch: int, log: TrainLog) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}) at epoch {epoch}, batch {batch}", epoch, batch, log)


def _check_params(arrays: Dict, epoch: int, batch: int, log: TrainLog) -> None:
    # relu and batch norm can mask blown-up weights, so the loss alone is not enough
    for key, a in arrays.items():
        if not np.isfinite(a).all():
            raise DivergenceError(
                f"parameter {key[0]}.{key[1]} became non-finite at epoch {epoch}, batch {batch}", epoch, batch, log
            )


def train_labels(
    m: ModelGraph,
    train: Split,
    test: Split,
    cfg: TrainConfig,
    keep_best: bool = False,
    trainable: Optional[Iterable[str]] = None,
    label: str = "train",
) -> Tuple[ModelGraph, TrainLog]:
    """Cross-entropy training of every non-frozen parameter of a copy of ``m``.

    With ``keep_best`` the returned model is the epoch with the highest test
    accuracy (earliest on ties); otherwise the final epoch. Zero epochs return
    an unchanged copy and an empty log.
    """
    if train.classes != m.num_classes:
        raise ValueError(f"dataset has {train.classes} classes, model predicts {m.num_classes}")
    work = m.copy()
    log = TrainLog(label=label)
    ids = set(work.parameterized_ids()) - work.frozen if trainable is None else set(trainable)
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    best, best_acc, step = work.copy() if keep_best else None, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for bi, batch in enumerate(batches(train, cfg.batch_size, derive_seed(cfg.seed, label, "epoch", epoch)), 1):
            trace = work.run(batch.images, train=True, trainable=ids)
            loss = ops.softmax_cross_entropy(trace.output, batch.labels)
            _check_finite(loss.item(), "task loss", epoch, bi, log)
            loss.backward()
            grads = trace.grads()
            opt.step({k: work.params[k[0]][k[1]] for k in grads}, grads, cfg.rate(step, total))
            _check_params({k: work.params[k[0]][k[1]] for k in grads}, epoch, bi, log)
            losses.append(loss.item())
            step += 1
        test_acc = accuracy_of(work, test)
        log.records.append(
            EpochRecord(epoch, float("nan"), float(np.mean(losses)), accuracy_of(work, train), test_acc,
                        time.perf_counter() - t0)
        )
        if keep_best and test_acc > best_acc:
            best, best_acc = work.copy(), test_acc
    return (best if keep_best else work), log
