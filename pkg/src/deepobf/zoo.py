"""Reference architectures."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .errors import GraphError
from .graph import BlockSpec, LayerSpec, ModelGraph, init_block_params, init_params, sequential_block


def inception_block(name: str, in_ch: int, out_ch: int) -> BlockSpec:
    """Two parallel branches (1x1 and 3x3 conv, half the channels each), concatenated, then BN + ReLU."""
    if out_ch % 2:
        raise ValueError(f"inception block output channels must be even, got {out_ch}")
    half = out_ch // 2
    return BlockSpec(
        name,
        (
            LayerSpec(f"{name}.b1", "conv", ("in",), in_ch, half, kernel=1),
            LayerSpec(f"{name}.b3", "conv", ("in",), in_ch, half, kernel=3, padding=1),
            LayerSpec(f"{name}.cat", "concat", (f"{name}.b1", f"{name}.b3")),
            LayerSpec(f"{name}.bn", "batchnorm", (f"{name}.cat",), out_ch),
            LayerSpec(f"{name}.relu", "relu", (f"{name}.bn",)),
        ),
    )


def pool_block(name: str, kernel: int = 2) -> BlockSpec:
    return sequential_block(name, [LayerSpec(f"{name}.max", "maxpool", kernel=kernel, stride=kernel)])


def classifier_block(features: int, classes: int, name: str = "classifier") -> BlockSpec:
    return sequential_block(
        name,
        [
            LayerSpec("gap", "global_avgpool"),
            LayerSpec("flatten", "flatten"),
            LayerSpec("fc", "linear", in_channels=features, out_channels=classes),
        ],
        role="classifier",
    )


def mini_inception(
    rng: np.random.Generator,
    input_shape: Sequence[int] = (3, 16, 16),
    classes: int = 4,
    widths: Sequence[int] = (16, 32, 64),
    pool_after: int = 2,
) -> ModelGraph:
    """Toy teacher: inception blocks with a 2x2 max-pool after block ``pool_after``, GAP, one linear layer."""
    blocks, c = [], input_shape[0]
    for i, w in enumerate(widths, start=1):
        blocks.append(inception_block(f"incep{i}", c, w))
        c = w
        if i == pool_after:
            blocks.append(pool_block(f"pool{i}"))
    blocks.append(classifier_block(c, classes))
    params = {}
    for b in blocks:
        params.update(init_block_params(b, rng))
    return ModelGraph(blocks, params, input_shape, classes)


def with_new_head(m: ModelGraph, classes: int, rng: np.random.Generator) -> ModelGraph:
    """Copy of ``m`` whose classifier linear layer is replaced by a fresh one with ``classes`` outputs."""
    head = m.classifier
    fc = [n for n in head.nodes if n.kind == "linear"]
    if len(fc) != 1:
        raise GraphError(f"classifier {head.name!r} must hold exactly one linear layer, found {len(fc)}")
    new_fc = replace(fc[0], out_channels=classes)
    new_head = BlockSpec(head.name, tuple(new_fc if n.id == new_fc.id else n for n in head.nodes), head.role)
    params = {k: {p: a.copy() for p, a in v.items()} for k, v in m.params.items() if k != new_fc.id}
    params[new_fc.id] = init_params(new_fc, rng)
    return ModelGraph(tuple(m.feature_blocks) + (new_head,), params, m.input_shape, classes, m.frozen - {new_fc.id})
