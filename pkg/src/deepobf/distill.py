"""Joint hint + label training of a shallow simulator spliced into a working model."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .analyzer import SimulatorPlan
from .data import Split
from .errors import ShapeError
from .graph import ModelGraph, init_block_params
from .optim import SGD, cosine_lr
from .seeding import derive_seed, rng_for
from .tensor import Tensor
from .training import EpochRecord, TrainLog, _check_finite, _check_params, accuracy_of

MODES = ("alternating", "combined", "hint_only")
TASK_LOSSES = ("ce", "l1")


@dataclass(frozen=True)
class JointTrainConfig:
    alpha: float = 0.05
    mode: str = "alternating"
    epochs: int = 30
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    task_loss: str = "ce"
    schedule: str = "cosine"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task_loss not in TASK_LOSSES:
            raise ValueError(f"task loss must be one of {TASK_LOSSES}, got {self.task_loss!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch size >= 1 and lr > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")


def _hint_term(target: np.ndarray, student: Tensor) -> Tensor:
    if tuple(target.shape) != tuple(student.shape):
        raise ShapeError(
            f"hint training needs teacher and simulator outputs of the same dimension: "
            f"teacher {tuple(target.shape)} vs simulator {tuple(student.shape)}"
        )
    return ops.l1_loss(student, Tensor(target))


def _task_term(logits: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    if kind == "ce":
        return ops.softmax_cross_entropy(logits, labels)
    probs = ops.softmax(logits)
    return ops.l1_loss(probs, Tensor(ops.one_hot(labels, logits.shape[1], probs.dtype)))


def hint_loss(teacher: ModelGraph, student_mixed: ModelGraph, block: Union[str, Sequence[str]], sim_block: str, x) -> Tensor:
    """Mean L1 distance between the teacher's block exit and the simulator's exit (inference mode)."""
    last = block if isinstance(block, str) else list(block)[-1]
    target = teacher.forward_to_block(x, last).data
    return _hint_term(target, student_mixed.forward_to_block(x, sim_block))


def task_loss(student_mixed: ModelGraph, x, labels, kind: str = "ce") -> Tensor:
    """Classification loss of the mixed network: cross-entropy, or L1 between softmax and one-hot."""
    if kind not in TASK_LOSSES:
        raise ValueError(f"task loss must be one of {TASK_LOSSES}, got {kind!r}")
    return _task_term(student_mixed.forward(x), np.asarray(labels), kind)


def teacher_hints(teacher: ModelGraph, block: str, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    parts = [teacher.forward_to_block(images[i:i + chunk], block).data for i in range(0, len(images), chunk)]
    return np.concatenate(parts)


def build_mixed(
    working: ModelGraph,
    names: Sequence[str],
    plan: SimulatorPlan,
    sim_name: str,
    seed: int,
    init: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
) -> Tuple[ModelGraph, list]:
    """Working model with ``names`` replaced by the planned simulator; everything else frozen."""
    in_channels = working.block_in[names[0]][0]
    block = plan.to_block(sim_name, in_channels)
    params = init if init is not None else init_block_params(block, rng_for(seed, "init", sim_name))
    mixed = working.replace_blocks(names, block, params)
    sim_ids = [n.id for n in block.nodes if n.has_params]
    mixed.freeze_all_except(sim_ids)
    return mixed, sim_ids


def train_simulator(
    teacher: ModelGraph,
    target: Union[str, Sequence[str]],
    plan: SimulatorPlan,
    data: Tuple[Split, Split],
    cfg: JointTrainConfig,
    working: Optional[ModelGraph] = None,
    sim_name: Optional[str] = None,
    init: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
) -> Tuple[Dict[str, Dict[str, np.ndarray]], TrainLog]:
    """Train a simulator for ``target`` (one block name or a contiguous group).

    Hints come from ``teacher``; the downstream path for the label term is
    ``working`` (default: the teacher) with the simulator spliced in. Only
    simulator parameters move. Returns the final simulator parameters and the
    log, which also carries digests of every other parameter before and after.
    """
    names = [target] if isinstance(target, str) else list(target)
    working = teacher if working is None else working
    sim_name = sim_name or f"sim_{names[0]}"
    train, test = data
    mixed, sim_ids = build_mixed(working, names, plan, sim_name, cfg.seed, init)
    others = [i for i in mixed.parameterized_ids() if i not in sim_ids]
    log = TrainLog(label=sim_name, frozen_digest_before=mixed.params_digest(others))

    hints = teacher_hints(teacher, names[-1], train.images)
    expected = mixed.block_output_shape(sim_name)
    if hints.shape[1:] != expected:
        raise ShapeError(
            f"hint training needs teacher and simulator outputs of the same dimension: "
            f"teacher {hints.shape[1:]} vs simulator {expected}"
        )
    test_hints = teacher_hints(teacher, names[-1], test.images)

    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    total = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        h_losses, t_losses = [], []
        order_seed = derive_seed(cfg.seed, sim_name, "epoch", epoch)
        order = np.random.default_rng(order_seed).permutation(len(train))
        for bi, lo in enumerate(range(0, len(train), cfg.batch_size), 1):
            idx = order[lo:lo + cfg.batch_size]
            x, y, target_h = Tensor(train.images[idx]), train.labels[idx], hints[idx]
            hint_step = cfg.mode == "hint_only" or (cfg.mode == "alternating" and bi % 2 == 1)
            if cfg.mode == "alternating" and not hint_step and cfg.alpha == 0:
                step += 1
                continue
            if hint_step:
                trace = mixed.run(x, train=True, until=sim_name, trainable=sim_ids)
                loss = _hint_term(target_h, trace.output)
                h_losses.append(loss.item())
            elif cfg.mode == "alternating":
                trace = mixed.run(x, train=True, trainable=sim_ids)
                task = _task_term(trace.output, y, cfg.task_loss)
                t_losses.append(task.item())
                loss = ops.scale(task, cfg.alpha)
            else:
                trace = mixed.run(x, train=True, taps=[sim_name], trainable=sim_ids)
                h = _hint_term(target_h, trace.taps[sim_name])
                task = _task_term(trace.output, y, cfg.task_loss)
                h_losses.append(h.item())
                t_losses.append(task.item())
                loss = ops.add(h, ops.scale(task, cfg.alpha))
            _check_finite(loss.item(), "loss", epoch, bi, log)
            loss.backward()
            grads = trace.grads()
            rate = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
            opt.step({k: mixed.params[k[0]][k[1]] for k in grads}, grads, rate)
            _check_params({k: mixed.params[k[0]][k[1]] for k in grads}, epoch, bi, log)
            step += 1
        log.records.append(
            EpochRecord(
                epoch,
                float(np.mean(h_losses)) if h_losses else float("nan"),
                float(np.mean(t_losses)) if t_losses else float("nan"),
                accuracy_of(mixed, train),
                accuracy_of(mixed, test),
                time.perf_counter() - t0,
            )
        )
    log.frozen_digest_after = mixed.params_digest(others)
    if len(test):
        log.test_hint_loss = float(np.mean(np.abs(teacher_hints(mixed, sim_name, test.images) - test_hints)))
    return {i: {p: a.copy() for p, a in mixed.params[i].items()} for i in sim_ids}, log
