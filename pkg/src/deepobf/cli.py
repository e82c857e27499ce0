"""Command-line entry point: ``deepobf train|obfuscate|eval|attack|analyze``."""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Tuple

from . import modelfile
from .analyzer import block_channels, collapse_linear_block, receptive_field
from .config import RunConfig, load_config, parse_config
from .data import Split, load_cifar_binary, parse_spec, synth_generate
from .distill import JointTrainConfig
from .errors import (
    AnalysisError,
    ClassCountError,
    ConfigError,
    DatasetError,
    DivergenceError,
    GraphError,
    InterfaceMismatchError,
    ModelFileError,
    ResumeMismatchError,
)
from .evaluation import AttackConfig, DeclinationRow, accuracy, declination_csv_row, declination_table, inference_time, run_attack
from .pipeline import Interrupted, TimingConfig, default_plan, obfuscate
from .seeding import derive_seed, rng_for
from .training import TrainConfig, train_labels
from .zoo import mini_inception

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("", "<defaults>")
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["run"]["out"] = args.out
    return cfg


def _load_data(cfg: RunConfig, spec_text: Optional[str] = None, section: str = "data") -> Tuple[Split, Split]:
    if spec_text is None and cfg["data"]["cifar_dir"]:
        return load_cifar_binary(cfg["data"]["cifar_dir"])
    text = spec_text if spec_text is not None else cfg["data"]["spec"]
    try:
        return synth_generate(parse_spec(text))
    except DatasetError as exc:
        key = "spec" if section == "data" else "target"
        raise cfg.error(section, key, str(exc)) from exc


def _load_model(path: str):
    if not os.path.exists(path):
        raise CliError(f"model file not found: {path}", EXIT_CONFIG)
    try:
        return modelfile.load(path)
    except ModelFileError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from exc


def _out_dir(cfg: RunConfig) -> str:
    out = cfg["run"]["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _train_config(cfg: RunConfig, label: str) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["epochs"], t["lr"], t["momentum"], t["weight_decay"], t["batch_size"],
                       derive_seed(cfg["run"]["seed"], label), t["schedule"])


# --- commands -------------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    m = cfg["model"]
    train, test = _load_data(cfg)
    if train.classes != m["classes"]:
        raise cfg.error("model", "classes", f"dataset has {train.classes} classes")
    if tuple(train.image_shape) != tuple(m["input"]):
        raise cfg.error("model", "input", f"dataset images are {'x'.join(map(str, train.image_shape))}")
    seed = cfg["run"]["seed"]
    model = mini_inception(rng_for(seed, "teacher-init"), m["input"], m["classes"], m["widths"], m["pool_after"])
    teacher, log = train_labels(model, train, test, _train_config(cfg, "teacher"), label="teacher")
    out = _out_dir(cfg)
    modelfile.save(teacher, os.path.join(out, "teacher.dobf"))
    log.write_csv(os.path.join(out, "train.csv"))
    acc = log.records[-1].test_acc if log.records else accuracy(teacher, test)
    print(f"teacher: {len(log)} epochs, test accuracy {100 * acc:.2f}%, {teacher.param_bytes()} bytes")
    print(f"wrote {os.path.join(out, 'teacher.dobf')} and {os.path.join(out, 'train.csv')}")
    return EXIT_OK


def _plan(cfg: RunConfig, teacher):
    o = cfg["obfuscate"]
    seed = cfg["run"]["seed"]
    groups = o["groups"]
    if groups is not None:
        known = {b.name for b in teacher.feature_blocks}
        for g in groups:
            for name in g:
                if name not in known:
                    raise cfg.error("obfuscate", "groups", f"unknown block {name!r} (teacher has {sorted(known)})")

    def joint(epochs, lr):
        return JointTrainConfig(o["alpha"], o["mode"], epochs, lr, o["momentum"], o["weight_decay"],
                                o["batch_size"], 0, o["task_loss"], o["schedule"])

    ft = TrainConfig(o["finetune_epochs"], o["finetune_lr"], o["momentum"], o["weight_decay"], o["batch_size"],
                     0, o["schedule"])
    try:
        return default_plan(teacher, seed, o["round1_depth"], o["round2_depth"], o["round2_channels"],
                            joint(o["round1_epochs"], o["round1_lr"]), ft, joint(o["round2_epochs"], o["round2_lr"]),
                            groups)
    except (AnalysisError, GraphError) as exc:
        raise CliError(f"obfuscation plan does not fit the teacher: {exc}", EXIT_MISMATCH) from exc


def cmd_obfuscate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    teacher = _load_model(args.teacher or os.path.join(out, "teacher.dobf"))
    data = _load_data(cfg)
    if data[0].classes != teacher.num_classes:
        raise CliError(f"dataset has {data[0].classes} classes, teacher predicts {teacher.num_classes}", EXIT_MISMATCH)
    plan = _plan(cfg, teacher)
    timing = TimingConfig(cfg["timing"]["warmup"], cfg["timing"]["runs"])
    try:
        final, report = obfuscate(teacher, plan, data, os.path.join(out, "checkpoints"), timing,
                                  stop_after=args.stop_after, progress=lambda s: print(s, flush=True))
    except Interrupted as exc:
        print(f"interrupted: {exc}")
        return EXIT_OK
    modelfile.save(final, os.path.join(out, "obfuscated.dobf"))
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    logs_dir = os.path.join(out, "logs")
    os.makedirs(logs_dir, exist_ok=True)
    for stage, logs in report.logs.items():
        for lg in logs:
            lg.write_csv(os.path.join(logs_dir, f"{stage}-{lg.label}.csv"))
    print(report.to_text(), end="")
    print(f"final model: {final.digest()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    m = _load_model(args.model)
    _, test = _load_data(cfg, args.data)
    if test.classes != m.num_classes:
        raise CliError(f"dataset has {test.classes} classes, model predicts {m.num_classes}", EXIT_MISMATCH)
    warmup = cfg["timing"]["warmup"] if args.runs is None else min(100, args.runs)
    runs = cfg["timing"]["runs"] if args.runs is None else args.runs
    acc = accuracy(m, test)
    us = inference_time(m, test.images, warmup, runs)
    print(f"{'model':<28} {'acc.':>8} {'size (B)':>10} {'time (us)':>10}")
    print(f"{os.path.basename(args.model):<28} {100 * acc:>7.2f}% {m.param_bytes():>10d} {us:>10.1f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    a = cfg["attack"]
    seed = cfg["run"]["seed"]
    m = _load_model(args.model)
    data = _load_data(cfg, a["target"], "attack")
    new_classes = a["new_classes"] if a["kind"] == "incremental" else None
    if a["kind"] == "incremental" and new_classes is None:
        new_classes = data[0].classes
    acfg = AttackConfig(a["kind"], a["target"], new_classes, a["epochs"], a["lr"], batch_size=a["batch_size"],
                        seed=derive_seed(seed, "attack", a["kind"]), train_per_class=a["train_per_class"])
    res = run_attack(m, acfg, data)
    print(f"{a['kind']} on {os.path.basename(args.model)}: best test accuracy {100 * res.best_acc:.2f}%, "
          f"extractor parameter delta: {'changed' if res.extractor_changed else 'none'}")
    if args.baseline:
        base = run_attack(_load_model(args.baseline), acfg, data)
        print(f"{a['kind']} on {os.path.basename(args.baseline)}: best test accuracy {100 * base.best_acc:.2f}%")
        row = DeclinationRow(a["network"], a["kind"], base.best_acc, res.best_acc)
        path = os.path.join(_out_dir(cfg), "declination.csv")
        fresh = not os.path.exists(path)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(declination_table([row])["csv"] if fresh else declination_csv_row(row))
        print(declination_table([row])["text"], end="")
    return EXIT_OK


def _linear_block(block) -> bool:
    return all(n.kind in ("conv", "concat", "add") for n in block.nodes)


def cmd_analyze(args) -> int:
    m = _load_model(args.model)
    blocks = list(m.feature_blocks)
    if args.block:
        try:
            blocks = [m.block(args.block)]
        except GraphError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from exc
    for b in blocks:
        c_in = m.block_in[b.name][0]
        print(f"block {b.name}")
        if args.what in ("rf", "all"):
            rf = receptive_field(b)
            _, c_out = block_channels(b, c_in)
            print(f"  receptive field {rf}  stride {rf.stride}  padding {rf.padding}  channels {c_in}->{c_out}")
        if args.what in ("collapse", "all"):
            if _linear_block(b):
                conv = collapse_linear_block(b, m.params, c_in)
                print(f"  collapsed: {conv.summary()}")
            else:
                bad = next(n for n in b.nodes if n.kind not in ("conv", "concat", "add"))
                print(f"  collapse: not linear ({bad.kind} node {bad.id!r})")
    if args.block is None and args.what in ("rf", "all") and blocks:
        rf = receptive_field(blocks)
        print(f"extractor receptive field {rf}  stride {rf.stride}")
    return EXIT_OK


# --- wiring ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepobf", description="Structural obfuscation of CNN models.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train the configured teacher from scratch")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("obfuscate", parents=[common], help="run the two-round obfuscation pipeline")
    o.add_argument("--teacher", help="teacher model file (default <out>/teacher.dobf)")
    o.add_argument("--stop-after", help=argparse.SUPPRESS)
    o.set_defaults(func=cmd_obfuscate)

    e = sub.add_parser("eval", parents=[common], help="accuracy, size and inference time of a model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", help="dataset spec string (default: [data] spec)")
    e.add_argument("--runs", type=int, help="timed single-sample passes (default: [timing] runs)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", parents=[common], help="fine-tuning attack, optionally against a baseline")
    a.add_argument("--model", required=True)
    a.add_argument("--baseline", help="original model; enables a declination row")
    a.set_defaults(func=cmd_attack)

    z = sub.add_parser("analyze", parents=[common], help="receptive fields and linear collapse per block")
    z.add_argument("what", nargs="?", choices=("rf", "collapse", "all"), default="all")
    z.add_argument("--model", required=True)
    z.add_argument("--block")
    z.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InterfaceMismatchError, ClassCountError, ResumeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
