"""Strict INI run configuration.

Every section and key is declared in ``SCHEMA``; anything else is rejected
with the file line it came from.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from .errors import ConfigError

_SHAPE = re.compile(r"^(\d+)x(\d+)x(\d+)$")


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _ints(v: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _shape(v: str) -> Tuple[int, int, int]:
    m = _SHAPE.match(v.strip())
    if not m:
        raise ValueError("expected <c>x<h>x<w>")
    return tuple(int(g) for g in m.groups())


def _groups(v: str) -> List[List[str]]:
    """``a, b; c`` -> ``[["a", "b"], ["c"]]``."""
    out = [[n.strip() for n in g.split(",") if n.strip()] for g in v.split(";")]
    if any(not g for g in out):
        raise ValueError("empty block group")
    return out


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


def _str(v: str) -> str:
    return v


_MODES = _choice("alternating", "combined", "hint_only")
_SCHEDULES = _choice("cosine", "constant")

# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "run": {"seed": (_int, 0), "out": (_str, "out")},
    "model": {
        "arch": (_choice("mini_inception"), "mini_inception"),
        "input": (_shape, (3, 16, 16)),
        "classes": (_int, 4),
        "widths": (_ints, (16, 32, 64)),
        "pool_after": (_int, 2),
    },
    "data": {"spec": (_str, "synth:4:3x16x16:200:50:7"), "cifar_dir": (_str, None)},
    "train": {
        "epochs": (_int, 10),
        "lr": (_float, 0.05),
        "momentum": (_float, 0.9),
        "weight_decay": (_float, 5e-4),
        "batch_size": (_int, 32),
        "schedule": (_SCHEDULES, "cosine"),
    },
    "obfuscate": {
        "groups": (_groups, None),
        "round1_depth": (_int, 2),
        "round2_depth": (_int, 3),
        "round2_channels": (_ints, None),
        "alpha": (_float, 0.05),
        "mode": (_MODES, "alternating"),
        "task_loss": (_choice("ce", "l1"), "ce"),
        "round1_epochs": (_int, 30),
        "round1_lr": (_float, 0.5),
        "finetune_epochs": (_int, 10),
        "finetune_lr": (_float, 0.02),
        "round2_epochs": (_int, 30),
        "round2_lr": (_float, 0.5),
        "momentum": (_float, 0.9),
        "weight_decay": (_float, 5e-4),
        "batch_size": (_int, 32),
        "schedule": (_SCHEDULES, "cosine"),
    },
    "attack": {
        "kind": (_choice("incremental", "transfer_finetune", "transfer_frozen", "scratch"), "transfer_finetune"),
        "target": (_str, "synth:4:3x16x16:200:50:11:shift=3,2"),
        "new_classes": (_int, None),
        "epochs": (_int, 10),
        "lr": (_float, 0.02),
        "batch_size": (_int, 32),
        "train_per_class": (_int, None),
        "network": (_str, "model"),
    },
    "timing": {"warmup": (_int, 100), "runs": (_int, 1000)},
}


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, Any]]
    path: str = "<config>"
    lines: Optional[Dict[Tuple[str, str], int]] = None

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.values[section]

    def line_of(self, section: str, key: Optional[str] = None) -> Optional[int]:
        return (self.lines or {}).get((section, key))

    def error(self, section: str, key: Optional[str], message: str) -> ConfigError:
        line = self.line_of(section, key)
        where = f"{self.path}:{line}" if line else self.path
        name = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{where}: {name}: {message}")


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    index: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        m = re.match(r"^\[([^\]]+)\]$", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        if section is not None:
            index.setdefault((section, key), no)
    return index


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    lines = _line_index(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), strict=True)
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values: Dict[str, Dict[str, Any]] = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    cfg = RunConfig(values, path, lines)
    for section in cp.sections():
        if section not in SCHEMA:
            raise cfg.error(section, None, f"unknown section (known: {', '.join(SCHEMA)})")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise cfg.error(section, key, f"unknown key (known: {', '.join(SCHEMA[section])})")
            parse = SCHEMA[section][key][0]
            try:
                values[section][key] = parse(raw.strip())
            except ValueError as exc:
                raise cfg.error(section, key, f"invalid value {raw.strip()!r}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
