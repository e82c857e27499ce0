"""Receptive-field calculus, exact collapse of linear conv blocks, simulator planning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .errors import AnalysisError, CollapseError
from .graph import ENTRY, KERNEL_KINDS, MERGE_KINDS, POINTWISE_KINDS, BlockSpec, LayerSpec, sequential_block


@dataclass(frozen=True)
class ReceptiveField:
    """Input patch one output pixel depends on.

    ``padding`` is the cumulative padding: output pixel ``i`` starts reading the
    input at row ``i * stride - padding``.
    """

    height: int
    width: int
    stride: int = 1
    padding: int = 0

    def then(self, other: "ReceptiveField") -> "ReceptiveField":
        """Compose with a block applied after this one."""
        return ReceptiveField(
            self.height + (other.height - 1) * self.stride,
            self.width + (other.width - 1) * self.stride,
            self.stride * other.stride,
            self.padding + other.padding * self.stride,
        )

    def __str__(self):
        return f"{self.height}×{self.width}"


def _node_rfs(block: BlockSpec) -> Dict[str, ReceptiveField]:
    rf = {ENTRY: ReceptiveField(1, 1, 1, 0)}
    for n in block.nodes:
        ins = [rf[s] for s in n.inputs]
        if n.kind in KERNEL_KINDS:
            x = ins[0]
            rf[n.id] = x.then(ReceptiveField(n.kernel, n.kernel, n.stride, n.padding))
        elif n.kind in POINTWISE_KINDS:
            rf[n.id] = ins[0]
        elif n.kind in MERGE_KINDS:
            strides = {r.stride for r in ins}
            if len(strides) != 1:
                raise AnalysisError(f"node {n.id!r} merges branches with different strides {sorted(strides)}")
            rf[n.id] = ReceptiveField(
                max(r.height for r in ins), max(r.width for r in ins), strides.pop(), max(r.padding for r in ins)
            )
        else:
            raise AnalysisError(f"node {n.id!r} ({n.kind}) is not a kernel, pointwise or merge op; no receptive field")
    return rf


def receptive_field(block: Union[BlockSpec, Sequence[BlockSpec]]) -> ReceptiveField:
    """Receptive field at the exit of a block, or of consecutive blocks composed in order."""
    blocks = [block] if isinstance(block, BlockSpec) else list(block)
    if not blocks:
        raise AnalysisError("no blocks given")
    total = ReceptiveField(1, 1, 1, 0)
    for b in blocks:
        total = total.then(_node_rfs(b)[b.exit])
    return total


def block_channels(block: BlockSpec, in_channels: Optional[int] = None) -> Tuple[int, int]:
    """(input channels, output channels) of a block, inferring the input from entry nodes when possible."""
    if in_channels is None:
        for n in block.nodes:
            if ENTRY in n.inputs and n.kind in ("conv", "batchnorm"):
                in_channels = n.in_channels
                break
        else:
            raise AnalysisError(f"block {block.name!r}: cannot infer input channels; pass in_channels")
    ch = {ENTRY: in_channels}
    for n in block.nodes:
        ins = [ch[s] for s in n.inputs]
        if n.kind == "conv":
            ch[n.id] = n.out_channels
        elif n.kind == "concat":
            ch[n.id] = sum(ins)
        elif n.kind == "linear":
            raise AnalysisError(f"block {block.name!r}: node {n.id!r} is not an image op")
        else:
            ch[n.id] = ins[0]
    return in_channels, ch[block.exit]


# --- exact collapse ------------------------------------------------------------------------


@dataclass
class ConvParams:
    """A single convolution: kernels (out, in, kh, kw), per-channel bias, stride, symmetric padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise AnalysisError(f"kernels must be a non-empty 4-D array, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise AnalysisError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels")
        if self.stride < 1 or self.padding < 0:
            raise AnalysisError(f"invalid stride {self.stride} / padding {self.padding}")

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def summary(self) -> str:
        kh, kw = self.kernel_size
        return (
            f"conv {self.in_channels}->{self.out_channels} kernel {kh}×{kw} stride {self.stride} "
            f"padding {self.padding} |W|max {np.abs(self.weight).max():.4g}"
        )


def _identity(channels: int) -> ConvParams:
    return ConvParams(np.eye(channels)[:, :, None, None], np.zeros(channels), 1, 0)


def _compose(first: ConvParams, w2: np.ndarray, b2: np.ndarray, s2: int, p2: int, node_id: str, first_is_entry: bool):
    """Kernel of ``conv(w2) after first``: extent K1 + (k2 - 1) * S1."""
    if p2 and not first_is_entry:
        raise CollapseError(
            f"node {node_id!r} zero-pads an intermediate feature map; that border behaviour has no single-conv equivalent"
        )
    w1, s1 = first.weight, first.stride
    k1h, k1w = first.kernel_size
    co, m, k2h, k2w = w2.shape
    if m != w1.shape[0]:
        raise CollapseError(f"node {node_id!r}: expects {m} channels, receives {w1.shape[0]}")
    kh, kw = k1h + (k2h - 1) * s1, k1w + (k2w - 1) * s1
    w = np.zeros((co, w1.shape[1], kh, kw))
    for u in range(k2h):
        for v in range(k2w):
            w[:, :, u * s1:u * s1 + k1h, v * s1:v * s1 + k1w] += np.einsum("om,mihw->oihw", w2[:, :, u, v], w1)
    b = b2 + np.einsum("omuv,m->o", w2, first.bias)
    return ConvParams(w, b, s1 * s2, first.padding + p2 * s1)


def _center_offset(c: ConvParams) -> float:
    return c.padding - (c.kernel_size[0] - 1) / 2, c.padding - (c.kernel_size[1] - 1) / 2


def _pad_to(c: ConvParams, kh: int, kw: int) -> np.ndarray:
    dh, dw = (kh - c.kernel_size[0]) // 2, (kw - c.kernel_size[1]) // 2
    return np.pad(c.weight, ((0, 0), (0, 0), (dh, kh - c.kernel_size[0] - dh), (dw, kw - c.kernel_size[1] - dw)))


def _merge(kind: str, parts: List[ConvParams], node_id: str) -> ConvParams:
    strides = {p.stride for p in parts}
    if len(strides) != 1:
        raise CollapseError(f"node {node_id!r} merges branches with strides {sorted(strides)}")
    if len({_center_offset(p) for p in parts}) != 1:
        raise CollapseError(f"node {node_id!r} merges branches whose kernels are not centred on the same pixel")
    kh = max(p.kernel_size[0] for p in parts)
    kw = max(p.kernel_size[1] for p in parts)
    padding = max(p.padding for p in parts)
    ws = [_pad_to(p, kh, kw) for p in parts]
    if kind == "concat":
        return ConvParams(np.concatenate(ws, axis=0), np.concatenate([p.bias for p in parts]), strides.pop(), padding)
    channels = {p.out_channels for p in parts}
    if len(channels) != 1:
        raise CollapseError(
            f"node {node_id!r}: add merges branches with {sorted(channels)} channels; "
            "an add merge needs equal channel counts on every branch"
        )
    return ConvParams(sum(ws), sum(p.bias for p in parts), strides.pop(), padding)


def collapse_linear_block(
    block: BlockSpec, params: Mapping[str, Mapping[str, np.ndarray]], in_channels: Optional[int] = None
) -> ConvParams:
    """Fold a block of conv/concat/add nodes into one equivalent convolution.

    Sequential pairs compose by convolving kernels (folding the first bias
    through the second kernel); concat stacks output channels and add sums
    kernels, after zero-padding the smaller kernels to a common centred extent.
    The result is computed in float64.
    """
    for n in block.nodes:
        if n.kind not in ("conv", "concat", "add"):
            raise CollapseError(f"node {n.id!r} ({n.kind}) is not linear; only conv, concat and add can be collapsed")
        if n.kind == "conv" and n.kernel % 2 == 0:
            raise CollapseError(f"node {n.id!r} has an even kernel ({n.kernel}); only odd kernels are supported")
    cin, _ = block_channels(block, in_channels)
    eq: Dict[str, ConvParams] = {ENTRY: _identity(cin)}
    for n in block.nodes:
        ins = [eq[s] for s in n.inputs]
        if n.kind == "conv":
            p = params[n.id]
            eq[n.id] = _compose(
                ins[0],
                np.asarray(p["weight"], dtype=np.float64),
                np.asarray(p["bias"], dtype=np.float64),
                n.stride,
                n.padding,
                n.id,
                first_is_entry=n.inputs[0] == ENTRY,
            )
        else:
            eq[n.id] = _merge(n.kind, ins, n.id)
    return eq[block.exit]


# --- simulator planning ---------------------------------------------------------------------


@dataclass(frozen=True)
class SimLayer:
    kernel: int
    stride: int
    padding: int
    out_channels: int
    batchnorm: bool = True
    relu: bool = True

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "out_channels": self.out_channels,
            "batchnorm": self.batchnorm,
            "relu": self.relu,
        }


@dataclass(frozen=True)
class SimulatorPlan:
    layers: Tuple[SimLayer, ...]
    target: str = ""
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise AnalysisError("a simulator plan needs at least one layer")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def stride(self) -> int:
        return math.prod(l.stride for l in self.layers)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def to_block(self, name: str, in_channels: int) -> BlockSpec:
        nodes, c = [], in_channels
        for i, l in enumerate(self.layers, start=1):
            nodes.append(LayerSpec(f"{name}.conv{i}", "conv", in_channels=c, out_channels=l.out_channels,
                                   kernel=l.kernel, stride=l.stride, padding=l.padding))
            if l.batchnorm:
                nodes.append(LayerSpec(f"{name}.bn{i}", "batchnorm", in_channels=l.out_channels))
            if l.relu:
                nodes.append(LayerSpec(f"{name}.relu{i}", "relu"))
            c = l.out_channels
        return sequential_block(name, nodes)

    def receptive_field(self) -> ReceptiveField:
        total = ReceptiveField(1, 1, 1, 0)
        for l in self.layers:
            total = total.then(ReceptiveField(l.kernel, l.kernel, l.stride, l.padding))
        return total

    def to_dict(self) -> dict:
        return {"target": self.target, "note": self.note, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulatorPlan":
        return cls(tuple(SimLayer(**l) for l in d["layers"]), d.get("target", ""), d.get("note", ""))


def _prime_factors(n: int) -> List[int]:
    out, p = [], 2
    while n > 1:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    return out


def _stack_rf(kernels: Sequence[int], strides: Sequence[int]) -> int:
    rf, cum = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * cum
        cum *= s
    return rf


def plan_for(
    target_rf: int,
    stride: int,
    in_channels: int,
    out_channels: int,
    depth_hint: Optional[int] = None,
    channels: Optional[Sequence[int]] = None,
    kernels: Optional[Sequence[int]] = None,
    target: str = "",
) -> SimulatorPlan:
    """Sequential plan covering ``target_rf`` with total stride ``stride``.

    Strided layers come first (one prime factor each). Kernels start at 1 and
    are raised to 3 from the first layer on until the receptive field is
    covered; if all-3x3 is not enough, kernels grow by 2 from the last layer
    backwards. Channels interpolate linearly (rounded up) from input to output.
    """
    if stride < 1 or target_rf < 1:
        raise AnalysisError(f"invalid target: receptive field {target_rf}, stride {stride}")
    factors = sorted(_prime_factors(stride), reverse=True)
    min_depth = max(1, len(factors))
    if depth_hint is not None:
        depth = depth_hint
    elif channels is not None:
        depth = len(channels)
    elif kernels is not None:
        depth = len(kernels)
    else:
        depth = min_depth
        while _stack_rf([3] * depth, factors + [1] * (depth - len(factors))) < target_rf:
            depth += 1
    if depth < min_depth:
        raise AnalysisError(f"depth {depth} cannot reach stride {stride}; minimum feasible depth is {min_depth}")
    strides = factors + [1] * (depth - len(factors))

    if kernels is None:
        ks = [1] * depth
        i = 0
        while _stack_rf(ks, strides) < target_rf and i < depth:
            ks[i] = 3
            i += 1
        j = depth - 1
        while _stack_rf(ks, strides) < target_rf:
            ks[j] += 2
            j = j - 1 if j > 0 else depth - 1
    else:
        ks = list(kernels)
        if len(ks) != depth:
            raise AnalysisError(f"{len(ks)} kernels given for a depth-{depth} plan")
        if any(k < 1 or k % 2 == 0 for k in ks):
            raise AnalysisError(f"kernels must be odd and positive, got {ks}")
        if _stack_rf(ks, strides) < target_rf:
            raise AnalysisError(f"kernels {ks} cover {_stack_rf(ks, strides)} < target receptive field {target_rf}")

    if channels is None:
        chans = [math.ceil(in_channels + (out_channels - in_channels) * i / depth) for i in range(1, depth + 1)]
    else:
        chans = list(channels)
        if len(chans) != depth:
            raise AnalysisError(f"{len(chans)} channel widths given for a depth-{depth} plan")
    if chans[-1] != out_channels:
        raise AnalysisError(f"last layer must output {out_channels} channels, plan gives {chans[-1]}")

    layers = tuple(SimLayer(k, s, (k - 1) // 2, c) for k, s, c in zip(ks, strides, chans))
    rf = _stack_rf(ks, strides)
    note = f"covers receptive field {rf} >= {target_rf}, stride {stride}, depth {depth}"
    return SimulatorPlan(layers, target, note)


def plan_simulator(
    block: Union[BlockSpec, Sequence[BlockSpec]],
    depth_hint: Optional[int] = None,
    in_channels: Optional[int] = None,
    out_channels: Optional[int] = None,
    channels: Optional[Sequence[int]] = None,
    kernels: Optional[Sequence[int]] = None,
) -> SimulatorPlan:
    """Plan a shallow sequential simulator for a block (or consecutive blocks)."""
    blocks = [block] if isinstance(block, BlockSpec) else list(block)
    rf = receptive_field(blocks)
    if in_channels is None:
        in_channels, _ = block_channels(blocks[0])
    if out_channels is None:
        c = in_channels
        for b in blocks:
            _, c = block_channels(b, c)
        out_channels = c
    target = "+".join(b.name for b in blocks)
    return plan_for(max(rf.height, rf.width), rf.stride, in_channels, out_channels, depth_hint, channels, kernels, target)
