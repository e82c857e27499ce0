"""Cost, accuracy and fine-tuning-attack measurements, plus the overhead and declination formulas."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Split, per_class_subset
from .errors import ClassCountError
from .graph import ModelGraph, init_block_params
from .seeding import rng_for
from .tensor import Tensor
from .training import TrainConfig, TrainLog, train_labels
from .zoo import with_new_head

ATTACKS = ("incremental", "transfer_finetune", "transfer_frozen", "scratch")


# --- formulas -------------------------------------------------------------------------------------


def overhead(cost1: float, cost2: float) -> float:
    """Relative cost of the obfuscated model: ``cost2 / cost1 - 1``."""
    return cost2 / cost1 - 1.0


def declination(acc1: float, acc2: float) -> float:
    """Loss of fine-tuning accuracy: ``1 - acc2 / acc1``; NaN when ``acc1`` is zero."""
    if acc1 == 0:
        return float("nan")
    return 1.0 - acc2 / acc1


# --- measurements ---------------------------------------------------------------------------------


def accuracy(m: ModelGraph, split: Split, batch_size: int = 256) -> float:
    if split.classes != m.num_classes:
        raise ClassCountError(f"dataset has {split.classes} classes but the model predicts {m.num_classes}")
    if len(split) == 0:
        return float("nan")
    return float(np.count_nonzero(m.predict(split.images, batch_size) == split.labels) / len(split))


def model_size(m: ModelGraph) -> int:
    return m.param_bytes()


def inference_time(m: ModelGraph, images: np.ndarray, warmup: int = 100, runs: int = 1000) -> float:
    """Mean wall time in microseconds of one single-sample forward pass.

    Samples cycle through ``images``; they are wrapped as tensors beforehand so
    only the forward computation is timed.
    """
    if len(images) == 0:
        raise ValueError("timing needs at least one image")
    xs = [Tensor(images[i % len(images)][None]) for i in range(min(len(images), max(runs, 1)))]
    for i in range(warmup):
        m.forward(xs[i % len(xs)])
    t0 = time.perf_counter()
    for i in range(runs):
        m.forward(xs[i % len(xs)])
    return (time.perf_counter() - t0) / max(runs, 1) * 1e6


# --- fine-tuning attacks --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "transfer_finetune"
    target: str = ""
    new_classes: Optional[int] = None
    epochs: int = 10
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    train_per_class: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"attack kind must be one of {ATTACKS}, got {self.kind!r}")
        if self.kind == "incremental" and self.new_classes is None:
            raise ValueError("an incremental attack needs new_classes")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.momentum, self.weight_decay, self.batch_size, self.seed)


@dataclass
class AttackResult:
    kind: str
    best_acc: float
    log: TrainLog
    extractor_digest_before: str
    extractor_digest_after: str

    @property
    def extractor_changed(self) -> bool:
        return self.extractor_digest_before != self.extractor_digest_after


def _extractor_ids(m: ModelGraph) -> List[str]:
    head = {n.id for n in m.classifier.nodes}
    return [i for i in m.parameterized_ids() if i not in head]


def retrain_head(
    m: ModelGraph, data: Tuple[Split, Split], cfg: AttackConfig, classes: int, freeze_extractor: bool,
    reinit: bool = False,
) -> AttackResult:
    """Swap in a fresh linear head with ``classes`` outputs and train; ``m`` itself is never touched.

    With ``reinit`` the extractor is re-initialised as well, so only the architecture is reused.
    """
    train, test = data
    if train.classes != classes or test.classes != classes:
        raise ClassCountError(f"attack data has {train.classes} classes, attack expects {classes}")
    if cfg.train_per_class is not None:
        train = per_class_subset(train, cfg.train_per_class)
    work = with_new_head(m, classes, rng_for(cfg.seed, "attack", cfg.kind, "head"))
    work.frozen = set()
    ext = _extractor_ids(work)
    if reinit:
        for b in work.feature_blocks:
            work.params.update(init_block_params(b, rng_for(cfg.seed, "attack", "scratch", b.name)))
    if freeze_extractor:
        work.freeze(ext)
    before = work.params_digest(ext)
    trained, log = train_labels(work, train, test, cfg.train_config(), keep_best=True, label=f"attack-{cfg.kind}")
    return AttackResult(cfg.kind, log.best_test_acc, log, before, trained.params_digest(ext))


def attack_incremental(m: ModelGraph, cfg: AttackConfig, data_new: Tuple[Split, Split]) -> AttackResult:
    """Enlarge the classifier to ``cfg.new_classes`` and fine-tune everything on the new data."""
    if cfg.kind != "incremental":
        raise ValueError(f"attack_incremental needs kind 'incremental', got {cfg.kind!r}")
    if cfg.new_classes <= m.num_classes:
        raise ClassCountError(
            f"incremental learning needs more classes than the model's {m.num_classes}, got {cfg.new_classes}"
        )
    return retrain_head(m, data_new, cfg, cfg.new_classes, freeze_extractor=False)


def attack_transfer(m: ModelGraph, cfg: AttackConfig, data_new: Tuple[Split, Split]) -> AttackResult:
    """Reinitialise the head; ``transfer_frozen`` trains only the head, ``transfer_finetune`` everything."""
    if cfg.kind not in ("transfer_finetune", "transfer_frozen"):
        raise ValueError(f"attack_transfer needs a transfer kind, got {cfg.kind!r}")
    if data_new[0].classes != m.num_classes:
        raise ClassCountError(
            f"transfer data has {data_new[0].classes} classes, the model predicts {m.num_classes}"
        )
    return retrain_head(m, data_new, cfg, m.num_classes, freeze_extractor=cfg.kind == "transfer_frozen")


def train_from_scratch(m: ModelGraph, cfg: AttackConfig, data_new: Tuple[Split, Split]) -> AttackResult:
    """Baseline: the same architecture, freshly initialised, trained on the new data alone."""
    return retrain_head(m, data_new, cfg, data_new[0].classes, freeze_extractor=False, reinit=True)


def run_attack(m: ModelGraph, cfg: AttackConfig, data_new: Tuple[Split, Split]) -> AttackResult:
    if cfg.kind == "scratch":
        return train_from_scratch(m, cfg, data_new)
    if cfg.kind == "incremental":
        return attack_incremental(m, cfg, data_new)
    return attack_transfer(m, cfg, data_new)


# --- tables ---------------------------------------------------------------------------------------


@dataclass(frozen=True)
class DeclinationRow:
    network: str
    attack: str
    baseline_acc: float
    obfuscated_acc: float

    @property
    def declination(self) -> float:
        return declination(self.baseline_acc, self.obfuscated_acc)

    @property
    def flagged(self) -> bool:
        return self.baseline_acc == 0


DECLINATION_COLUMNS = ("network", "attack", "baseline_acc", "obfuscated_acc", "declination", "flag")


def declination_table(rows: Sequence[DeclinationRow]) -> Dict[str, str]:
    """CSV and aligned text for a set of rows; declination is always recomputed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DECLINATION_COLUMNS)
    lines = [f"{'network':<20} {'attack':<18} {'baseline':>9} {'obfuscated':>11} {'decline':>8}"]
    for r in rows:
        d = r.declination
        flag = "undefined" if r.flagged else ""
        w.writerow([r.network, r.attack, f"{r.baseline_acc:.6f}", f"{r.obfuscated_acc:.6f}",
                    "nan" if math.isnan(d) else f"{d:.6f}", flag])
        shown = "n/a" if math.isnan(d) else f"{100 * d:.1f}%"
        lines.append(
            f"{r.network:<20} {r.attack:<18} {100 * r.baseline_acc:>8.2f}% {100 * r.obfuscated_acc:>10.2f}% {shown:>8}"
        )
    return {"csv": buf.getvalue(), "text": "\n".join(lines) + "\n"}


def declination_csv_row(r: DeclinationRow) -> str:
    return declination_table([r])["csv"].splitlines()[1] + "\n"


# --- published reference cells, used to check the formulas -------------------------------------


@dataclass(frozen=True)
class CostCell:
    network: str
    round: str
    acc: float
    size_mb: float
    time_us: float
    size_overhead: Optional[float]
    time_overhead: Optional[float]


COST_TABLE: Tuple[CostCell, ...] = (
    CostCell("GoogLeNet", "original", 0.9083, 2.51, 17.85, None, None),
    CostCell("GoogLeNet", "1st", 0.9099, 7.82, 7.69, 2.12, -0.59),
    CostCell("GoogLeNet", "2nd", 0.9092, 2.49, 7.01, -0.01, -0.63),
    CostCell("ResNet", "original", 0.9094, 43.36, 10.50, None, None),
    CostCell("ResNet", "1st", 0.9139, 26.80, 6.76, -0.38, -0.36),
    CostCell("ResNet", "2nd", 0.9104, 11.38, 5.17, -0.74, -0.51),
    CostCell("DenseNet", "original", 0.9014, 4.24, 35.53, None, None),
    CostCell("DenseNet", "1st", 0.9087, 8.86, 8.86, 1.09, -0.75),
    CostCell("DenseNet", "2nd", 0.9031, 4.21, 5.52, -0.01, -0.84),
)

# (network, task, original accuracy, obfuscated accuracy, printed declination)
DECLINATION_FIXTURES: Tuple[Tuple[str, str, float, float, float], ...] = (
    ("GoogLeNet", "CIFAR-100", 0.6650, 0.6359, 0.044),
    ("GoogLeNet", "STL10", 0.7915, 0.7795, 0.015),
    ("ResNet", "CIFAR-100", 0.6692, 0.6477, 0.032),
    ("ResNet", "STL10", 0.7886, 0.7597, 0.037),
    ("DenseNet", "CIFAR-100", 0.6716, 0.6291, 0.063),
    ("DenseNet", "STL10", 0.7845, 0.7690, 0.020),
)


@dataclass
class FixtureCheck:
    name: str
    computed: float
    printed: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return abs(self.computed - self.printed) <= self.tolerance + 1e-12


def cost_fixture_checks(tolerance: float = 0.01) -> List[FixtureCheck]:
    """Recompute every printed size/time overhead from its table cells."""
    base: Dict[str, CostCell] = {c.network: c for c in COST_TABLE if c.round == "original"}
    out = []
    for c in COST_TABLE:
        if c.round == "original":
            continue
        b = base[c.network]
        out.append(FixtureCheck(f"{c.network} {c.round} size", overhead(b.size_mb, c.size_mb), c.size_overhead, tolerance))
        out.append(FixtureCheck(f"{c.network} {c.round} time", overhead(b.time_us, c.time_us), c.time_overhead, tolerance))
    return out


def declination_fixture_checks(tolerance: float = 0.001) -> List[FixtureCheck]:
    """Recompute every printed declination from its two accuracy cells."""
    return [
        FixtureCheck(f"{net} {task}", declination(a1, a2), printed, tolerance)
        for net, task, a1, a2, printed in DECLINATION_FIXTURES
    ]


def fixture_report() -> Tuple[str, bool]:
    """CSV of every table-fixture recomputation and whether all of them hold."""
    checks = cost_fixture_checks() + declination_fixture_checks()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "computed", "printed", "tolerance", "ok"])
    for c in checks:
        w.writerow([c.name, f"{c.computed:.6f}", f"{c.printed:.6f}", f"{c.tolerance:g}", "yes" if c.ok else "no"])
    return buf.getvalue(), all(c.ok for c in checks)

