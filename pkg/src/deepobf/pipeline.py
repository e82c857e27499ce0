"""Two-round recursive obfuscation: per-group simulation, fine-tune, whole-extractor simulation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import modelfile
from .analyzer import SimulatorPlan, plan_simulator
from .data import Split
from .distill import JointTrainConfig, train_simulator
from .errors import GraphError, InterfaceMismatchError, ResumeMismatchError
from .evaluation import accuracy, inference_time, overhead
from .graph import ModelGraph, init_block_params
from .seeding import derive_seed
from .training import TrainConfig, TrainLog, train_labels

STAGES = ("original", "round1", "finetune", "round2")
FINAL_BLOCK = "features"


@dataclass(frozen=True)
class Group:
    blocks: Tuple[str, ...]
    plan: SimulatorPlan
    name: str

    def to_dict(self) -> dict:
        return {"blocks": list(self.blocks), "plan": self.plan.to_dict(), "name": self.name}


@dataclass(frozen=True)
class ObfuscationPlan:
    round1: Tuple[Group, ...]
    round2: SimulatorPlan
    round1_cfg: JointTrainConfig = JointTrainConfig()
    finetune_cfg: TrainConfig = TrainConfig(epochs=10, lr=0.02)
    round2_cfg: JointTrainConfig = JointTrainConfig()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "round1": [g.to_dict() for g in self.round1],
            "round2": self.round2.to_dict(),
            "round1_cfg": vars(self.round1_cfg),
            "finetune_cfg": vars(self.finetune_cfg),
            "round2_cfg": vars(self.round2_cfg),
            "seed": self.seed,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def default_plan(
    teacher: ModelGraph,
    seed: int = 0,
    round1_depth: int = 2,
    round2_depth: Optional[int] = 3,
    round2_channels: Optional[Sequence[int]] = None,
    round1_cfg: JointTrainConfig = JointTrainConfig(),
    finetune_cfg: TrainConfig = TrainConfig(epochs=10, lr=0.02),
    round2_cfg: JointTrainConfig = JointTrainConfig(),
    groups: Optional[Sequence[Sequence[str]]] = None,
) -> ObfuscationPlan:
    """One group per feature block that holds a convolution (pooling blocks stay between groups)."""
    if groups is None:
        groups = [[b.name] for b in teacher.feature_blocks if any(n.kind == "conv" for n in b.nodes)]
    r1 = []
    for i, names in enumerate(groups, start=1):
        blocks = [teacher.block(n) for n in names]
        c_in = teacher.block_in[names[0]][0]
        c_out = teacher.block_output_shape(names[-1])[0]
        plan = plan_simulator(blocks, round1_depth, in_channels=c_in, out_channels=c_out)
        r1.append(Group(tuple(names), plan, f"sim{i}"))
    r1 = tuple(r1)
    m_prime = _round1_skeleton(teacher, r1)
    features = list(m_prime.feature_blocks)
    c_out = m_prime.block_output_shape(features[-1].name)[0]
    r2 = plan_simulator(features, round2_depth, in_channels=teacher.input_shape[0], out_channels=c_out,
                        channels=round2_channels)
    r2 = replace(r2, target=FINAL_BLOCK)
    return ObfuscationPlan(r1, r2, round1_cfg, finetune_cfg, round2_cfg, seed)


def _round1_skeleton(teacher: ModelGraph, groups: Sequence[Group]) -> ModelGraph:
    """Structure of the intermediate model (parameters are placeholders)."""
    m = teacher
    for g in groups:
        block = g.plan.to_block(g.name, m.block_in[g.blocks[0]][0])
        m = m.replace_blocks(g.blocks, block, init_block_params(block, np.random.default_rng(0)))
    return m


def validate_plan(teacher: ModelGraph, plan: ObfuscationPlan) -> None:
    """Groups must be disjoint, contiguous, bottom-up, and each simulator must fit its group's interface."""
    order = {b.name: i for i, b in enumerate(teacher.feature_blocks)}
    last = -1
    seen = set()
    for g in plan.round1:
        for n in g.blocks:
            if n not in order:
                raise GraphError(f"group {g.name!r}: unknown feature block {n!r}")
            if n in seen:
                raise GraphError(f"group {g.name!r}: block {n!r} already belongs to an earlier group")
            seen.add(n)
        idx = [order[n] for n in g.blocks]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise GraphError(f"group {g.name!r}: blocks {list(g.blocks)} are not contiguous")
        if idx[0] <= last:
            raise GraphError(f"group {g.name!r} is out of bottom-up order")
        last = idx[-1]
    try:
        m_prime = _round1_skeleton(teacher, plan.round1)
    except InterfaceMismatchError as exc:
        raise InterfaceMismatchError(f"round-1 plan does not fit the teacher: {exc}") from exc
    block = plan.round2.to_block(FINAL_BLOCK, teacher.input_shape[0])
    try:
        m_prime.replace_blocks([b.name for b in m_prime.feature_blocks], block,
                               init_block_params(block, np.random.default_rng(0)))
    except InterfaceMismatchError as exc:
        raise InterfaceMismatchError(f"round-2 plan does not span the extractor: {exc}") from exc


# --- stages ---------------------------------------------------------------------------------------


def _with_seed(cfg, seed: int, *labels):
    return replace(cfg, seed=derive_seed(seed, *labels))


def obfuscate_round1(
    teacher: ModelGraph,
    plan: ObfuscationPlan,
    data: Tuple[Split, Split],
    on_group: Optional[Callable[[int, ModelGraph, List[TrainLog]], None]] = None,
    start: int = 0,
    working: Optional[ModelGraph] = None,
    logs: Optional[List[TrainLog]] = None,
) -> Tuple[ModelGraph, List[TrainLog]]:
    """Simulate each group bottom-up, splicing each trained simulator into the working model."""
    working = teacher if working is None else working
    logs = list(logs or [])
    for i, g in enumerate(plan.round1):
        if i < start:
            continue
        cfg = _with_seed(plan.round1_cfg, plan.seed, "round1", g.name)
        try:
            params, log = train_simulator(teacher, list(g.blocks), g.plan, data, cfg, working=working, sim_name=g.name)
        except InterfaceMismatchError as exc:
            raise InterfaceMismatchError(f"group {g.name!r} ({'+'.join(g.blocks)}): {exc}") from exc
        block = g.plan.to_block(g.name, working.block_in[g.blocks[0]][0])
        working = working.replace_blocks(list(g.blocks), block, params)
        logs.append(log)
        if on_group is not None:
            on_group(i, working, logs)
    return working, logs


def finetune(m: ModelGraph, data: Tuple[Split, Split], cfg: TrainConfig) -> Tuple[ModelGraph, TrainLog]:
    """Train every parameter on labels; return the best-test-accuracy epoch (or ``m`` for zero epochs)."""
    work = m.copy()
    work.frozen = set()
    train, test = data
    best, log = train_labels(work, train, test, cfg, keep_best=True, label="finetune")
    return best, log


def obfuscate_round2(
    m_prime: ModelGraph, plan: ObfuscationPlan, data: Tuple[Split, Split]
) -> Tuple[ModelGraph, TrainLog]:
    """Replace the whole extractor of ``m_prime`` by one sequential simulator trained on its output."""
    names = [b.name for b in m_prime.feature_blocks]
    cfg = _with_seed(plan.round2_cfg, plan.seed, "round2")
    params, log = train_simulator(m_prime, names, plan.round2, data, cfg, working=m_prime, sim_name=FINAL_BLOCK)
    block = plan.round2.to_block(FINAL_BLOCK, m_prime.input_shape[0])
    final = m_prime.replace_blocks(names, block, params)
    final.frozen = set()
    return final, log


# --- report ---------------------------------------------------------------------------------------


@dataclass
class StageRow:
    stage: str
    test_acc: float
    param_bytes: int
    mean_infer_us: float
    size_overhead: float = 0.0
    time_overhead: float = 0.0


REPORT_COLUMNS = ("stage", "test_acc", "param_bytes", "mean_infer_us", "size_overhead", "time_overhead")


@dataclass
class ObfuscationReport:
    rows: List[StageRow]
    logs: Dict[str, List[TrainLog]] = field(default_factory=dict)

    @classmethod
    def build(cls, measurements: Sequence[Tuple[str, float, int, float]], logs=None) -> "ObfuscationReport":
        """Rows from ``(stage, acc, bytes, us)``; overheads relative to the first row."""
        base = measurements[0]
        rows = []
        for i, (stage, acc, size, us) in enumerate(measurements):
            if i == 0:
                rows.append(StageRow(stage, acc, size, us, 0.0, 0.0))
            else:
                rows.append(StageRow(stage, acc, size, us, overhead(base[2], size), overhead(base[3], us)))
        return cls(rows, dict(logs or {}))

    def row(self, stage: str) -> StageRow:
        for r in self.rows:
            if r.stage == stage:
                return r
        raise KeyError(stage)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.stage, f"{r.test_acc:.6f}", r.param_bytes, f"{r.mean_infer_us:.3f}",
                        f"{r.size_overhead:.6f}", f"{r.time_overhead:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'stage':<10} {'acc.':>8} {'size (B)':>10} {'time (us)':>10} {'size ovh':>9} {'time ovh':>9}"
        lines = [head, "-" * len(head)]
        for i, r in enumerate(self.rows):
            so = "-" if i == 0 else f"{100 * r.size_overhead:+.0f}%"
            to = "-" if i == 0 else f"{100 * r.time_overhead:+.0f}%"
            lines.append(
                f"{r.stage:<10} {100 * r.test_acc:>7.2f}% {r.param_bytes:>10d} {r.mean_infer_us:>10.1f} {so:>9} {to:>9}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TimingConfig:
    warmup: int = 100
    runs: int = 1000


def measure(m: ModelGraph, test: Split, timing: TimingConfig) -> Tuple[float, int, float]:
    return accuracy(m, test), m.param_bytes(), inference_time(m, test.images, timing.warmup, timing.runs)


# --- checkpoints and the orchestrator -------------------------------------------------------------


class Checkpoints:
    """Stage checkpoints in one directory, guarded by a key over (plan, seed, data)."""

    MANIFEST = "manifest.json"

    def __init__(self, root, key: str):
        self.root = str(root)
        self.key = key
        os.makedirs(self.root, exist_ok=True)
        path = os.path.join(self.root, self.MANIFEST)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                found = json.load(fh).get("key")
            if found != key:
                raise ResumeMismatchError(
                    f"checkpoint directory {self.root} belongs to a different plan, seed or dataset "
                    f"(key {found}, this run {key})"
                )
        else:
            self._write_json(self.MANIFEST, {"key": key, "stages": []})

    def _write_json(self, name: str, obj) -> None:
        tmp = os.path.join(self.root, name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
        os.replace(tmp, os.path.join(self.root, name))

    def path(self, stage: str) -> str:
        return os.path.join(self.root, f"{stage}.dobf")

    def has(self, stage: str) -> bool:
        return os.path.exists(os.path.join(self.root, f"{stage}.json")) and os.path.exists(self.path(stage))

    def save(self, stage: str, m: ModelGraph, logs: Sequence[TrainLog]) -> None:
        modelfile.save(m, self.path(stage))
        meta = {
            "digest": m.digest(),
            "logs": [
                {
                    "label": lg.label,
                    "csv": lg.to_csv(),
                    "frozen_digest_before": lg.frozen_digest_before,
                    "frozen_digest_after": lg.frozen_digest_after,
                    "test_hint_loss": None if lg.test_hint_loss != lg.test_hint_loss else lg.test_hint_loss,
                }
                for lg in logs
            ],
        }
        self._write_json(f"{stage}.json", meta)

    def load(self, stage: str) -> Tuple[ModelGraph, List[TrainLog]]:
        with open(os.path.join(self.root, f"{stage}.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        m = modelfile.load(self.path(stage))
        logs = []
        for d in meta["logs"]:
            lg = TrainLog.from_csv(d["csv"], d["label"])
            lg.frozen_digest_before = d["frozen_digest_before"]
            lg.frozen_digest_after = d["frozen_digest_after"]
            if d["test_hint_loss"] is not None:
                lg.test_hint_loss = d["test_hint_loss"]
            logs.append(lg)
        return m, logs


def run_key(teacher: ModelGraph, plan: ObfuscationPlan, data: Tuple[Split, Split]) -> str:
    h = hashlib.sha256()
    for part in (plan.digest(), teacher.digest(), data[0].digest(), data[1].digest()):
        h.update(part.encode())
    return h.hexdigest()


class Interrupted(Exception):
    """Raised when a run is told to stop after a given stage."""

    def __init__(self, stage: str):
        super().__init__(f"stopped after stage {stage!r}")
        self.stage = stage


def obfuscate(
    teacher: ModelGraph,
    plan: ObfuscationPlan,
    data: Tuple[Split, Split],
    checkpoint_dir=None,
    timing: TimingConfig = TimingConfig(),
    stop_after: Optional[str] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> Tuple[ModelGraph, ObfuscationReport]:
    """round 1 -> fine-tune -> round 2 -> report.

    With ``checkpoint_dir`` every round-1 group and every stage is saved, and
    a rerun resumes from the latest finished one. ``stop_after`` (a stage name,
    or ``"round1:<k>"`` for the k-th group) raises :class:`Interrupted` once
    that checkpoint exists, which is how interruptions are exercised.
    """
    validate_plan(teacher, plan)
    say = progress or (lambda msg: None)
    ck = Checkpoints(checkpoint_dir, run_key(teacher, plan, data)) if checkpoint_dir is not None else None

    def stop(stage: str) -> None:
        if stop_after == stage:
            raise Interrupted(stage)

    if ck is not None and not ck.has("original"):
        ck.save("original", teacher, [])

    # round 1, resumable per group
    if ck is not None and ck.has("round1"):
        m_prime, r1_logs = ck.load("round1")
    else:
        start, working, r1_logs = 0, teacher, []
        if ck is not None:
            for i in reversed(range(len(plan.round1))):
                if ck.has(f"round1_{i + 1}"):
                    working, r1_logs = ck.load(f"round1_{i + 1}")
                    start = i + 1
                    break

        def on_group(i: int, m: ModelGraph, logs: List[TrainLog]) -> None:
            say(f"round 1: group {plan.round1[i].name} done")
            if ck is not None:
                ck.save(f"round1_{i + 1}", m, logs)
            stop(f"round1:{i + 1}")

        m_prime, r1_logs = obfuscate_round1(teacher, plan, data, on_group, start, working, r1_logs)
        if ck is not None:
            ck.save("round1", m_prime, r1_logs)
    stop("round1")

    if ck is not None and ck.has("finetune"):
        m_tuned, ft_logs = ck.load("finetune")
    else:
        m_tuned, ft_log = finetune(m_prime, data, _with_seed(plan.finetune_cfg, plan.seed, "finetune"))
        ft_logs = [ft_log]
        say(f"fine-tune done, best test accuracy {ft_log.best_test_acc:.4f}")
        if ck is not None:
            ck.save("finetune", m_tuned, ft_logs)
    stop("finetune")

    if ck is not None and ck.has("round2"):
        final, r2_logs = ck.load("round2")
    else:
        final, r2_log = obfuscate_round2(m_tuned, plan, data)
        r2_logs = [r2_log]
        say("round 2 done")
        if ck is not None:
            ck.save("round2", final, r2_logs)
    stop("round2")

    test = data[1]
    measurements = []
    for stage, m in zip(STAGES, (teacher, m_prime, m_tuned, final)):
        measurements.append((stage,) + measure(m, test, timing))
    report = ObfuscationReport.build(measurements, {"round1": r1_logs, "finetune": ft_logs, "round2": r2_logs})
    return final, report
