"""Declarative CNN graphs: layers grouped into single-entry/single-exit blocks.

A block's nodes are listed in topological order; a node input named ``"in"``
refers to the block's input. The last node is the block's exit. Node ids are
unique across the whole model and key the parameter store.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import GraphError, InterfaceMismatchError, ShapeError
from .tensor import Tensor

ENTRY = "in"
KINDS = ("conv", "batchnorm", "relu", "maxpool", "avgpool", "global_avgpool", "linear", "flatten", "concat", "add")
PARAM_KINDS = ("conv", "batchnorm", "linear")
KERNEL_KINDS = ("conv", "maxpool", "avgpool")
POINTWISE_KINDS = ("batchnorm", "relu")
MERGE_KINDS = ("concat", "add")
ROLES = ("feature_block", "classifier")

# fields serialised per kind, besides id/kind/inputs
_KIND_FIELDS = {
    "conv": ("in_channels", "out_channels", "kernel", "stride", "padding"),
    "batchnorm": ("in_channels", "eps", "momentum"),
    "maxpool": ("kernel", "stride", "padding"),
    "avgpool": ("kernel", "stride", "padding"),
    "linear": ("in_channels", "out_channels"),
}


@dataclass(frozen=True)
class LayerSpec:
    """One node. ``in_channels``/``out_channels`` double as feature counts for ``linear``."""

    id: str
    kind: str
    inputs: Tuple[str, ...] = (ENTRY,)
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind not in KINDS:
            raise GraphError(f"node {self.id!r}: unknown kind {self.kind!r}")
        if self.kind in MERGE_KINDS:
            if len(self.inputs) < 2:
                raise GraphError(f"node {self.id!r}: {self.kind} needs at least two inputs")
        elif len(self.inputs) != 1:
            raise GraphError(f"node {self.id!r}: {self.kind} takes exactly one input, got {len(self.inputs)}")
        if self.kind in ("conv", "linear") and (not self.in_channels or not self.out_channels):
            raise GraphError(f"node {self.id!r}: {self.kind} needs positive in/out channel counts")
        if self.kind == "batchnorm" and not self.in_channels:
            raise GraphError(f"node {self.id!r}: batchnorm needs a channel count")
        if self.kind in KERNEL_KINDS and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise GraphError(f"node {self.id!r}: invalid kernel={self.kernel} stride={self.stride} padding={self.padding}")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> Dict[str, tuple]:
        if self.kind == "conv":
            return {
                "weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                "bias": (self.out_channels,),
            }
        if self.kind == "linear":
            return {"weight": (self.out_channels, self.in_channels), "bias": (self.out_channels,)}
        if self.kind == "batchnorm":
            c = (self.in_channels,)
            return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
        return {}

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "inputs": list(self.inputs)}
        for name in _KIND_FIELDS.get(self.kind, ()):
            d[name] = getattr(self, name)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise GraphError(f"node {d.get('id')!r}: unknown fields {sorted(extra)}")
        return cls(**{**d, "inputs": tuple(d.get("inputs", (ENTRY,)))})


@dataclass(frozen=True)
class BlockSpec:
    name: str
    nodes: Tuple[LayerSpec, ...]
    role: str = "feature_block"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.role not in ROLES:
            raise GraphError(f"block {self.name!r}: unknown role {self.role!r}")
        if not self.nodes:
            raise GraphError(f"block {self.name!r} has no nodes")
        seen = set()
        consumed = set()
        reads_entry = False
        for node in self.nodes:
            if node.id in seen or node.id == ENTRY:
                raise GraphError(f"block {self.name!r}: duplicate or reserved node id {node.id!r}")
            for src in node.inputs:
                if src == ENTRY:
                    reads_entry = True
                elif src not in seen:
                    raise GraphError(
                        f"block {self.name!r}: node {node.id!r} reads {src!r}, which is not an earlier node of the block"
                    )
                consumed.add(src)
            seen.add(node.id)
        if not reads_entry:
            raise GraphError(f"block {self.name!r}: no node reads the block input")
        sinks = [n.id for n in self.nodes if n.id not in consumed]
        if sinks != [self.nodes[-1].id]:
            raise GraphError(f"block {self.name!r}: expected a single exit (the last node), found sinks {sinks}")

    @property
    def exit(self) -> str:
        return self.nodes[-1].id

    def node(self, node_id: str) -> LayerSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role, "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BlockSpec":
        return cls(name=d["name"], role=d.get("role", "feature_block"), nodes=tuple(LayerSpec.from_dict(n) for n in d["nodes"]))


def sequential_block(name: str, nodes: Sequence[LayerSpec], role: str = "feature_block") -> BlockSpec:
    """Chain ``nodes`` so each reads the previous one, regardless of their declared inputs."""
    chained, prev = [], ENTRY
    for n in nodes:
        chained.append(replace(n, inputs=(prev,)))
        prev = n.id
    return BlockSpec(name, tuple(chained), role)


# --- shape inference -----------------------------------------------------------------


def _spatial(size: int, node: LayerSpec) -> int:
    padded = size + 2 * node.padding
    if node.kernel > padded:
        raise ShapeError(f"node {node.id!r}: window {node.kernel} larger than padded input {padded}")
    return (padded - node.kernel) // node.stride + 1


def infer_block_shapes(block: BlockSpec, in_shape: tuple) -> Dict[str, tuple]:
    """Per-node output extents (without batch) for a block fed ``in_shape``.

    Raises :class:`ShapeError` when channel arithmetic does not close.
    """
    shapes: Dict[str, tuple] = {ENTRY: tuple(in_shape)}
    for n in block.nodes:
        ins = [shapes[s] for s in n.inputs]
        x = ins[0]
        k = n.kind
        if k in ("conv", "batchnorm", "maxpool", "avgpool", "global_avgpool", "relu") and len(x) != 3:
            if not (k == "relu" and len(x) == 1):
                raise ShapeError(f"node {n.id!r}: {k} needs an image (c, h, w) input, got {x}")
        if k == "conv":
            if x[0] != n.in_channels:
                raise ShapeError(f"node {n.id!r}: declares {n.in_channels} input channels but receives {x[0]}")
            out = (n.out_channels, _spatial(x[1], n), _spatial(x[2], n))
        elif k == "batchnorm":
            if x[0] != n.in_channels:
                raise ShapeError(f"node {n.id!r}: declares {n.in_channels} channels but receives {x[0]}")
            out = x
        elif k == "relu":
            out = x
        elif k in ("maxpool", "avgpool"):
            out = (x[0], _spatial(x[1], n), _spatial(x[2], n))
        elif k == "global_avgpool":
            out = (x[0], 1, 1)
        elif k == "flatten":
            out = (int(np.prod(x)),)
        elif k == "linear":
            if len(x) != 1 or x[0] != n.in_channels:
                raise ShapeError(f"node {n.id!r}: declares {n.in_channels} features but receives extent {x}")
            out = (n.out_channels,)
        elif k == "concat":
            if any(len(s) != 3 or s[1:] != x[1:] for s in ins):
                raise ShapeError(f"node {n.id!r}: concat inputs differ in spatial extent: {ins}")
            out = (sum(s[0] for s in ins),) + x[1:]
        elif k == "add":
            if any(s != x for s in ins):
                raise ShapeError(f"node {n.id!r}: add inputs differ in extent: {ins}")
            out = x
        else:  # pragma: no cover - guarded by LayerSpec
            raise GraphError(k)
        if any(d < 1 for d in out):
            raise ShapeError(f"node {n.id!r}: output extent {out} is empty")
        shapes[n.id] = out
    return shapes


def block_downsampling(block: BlockSpec) -> int:
    """Product of strides from block input to exit; branches must agree."""
    factor = {ENTRY: 1}
    for n in block.nodes:
        fs = {factor[s] for s in n.inputs}
        if len(fs) != 1:
            raise GraphError(f"block {block.name!r}: node {n.id!r} merges branches with downsampling {sorted(fs)}")
        f = fs.pop()
        factor[n.id] = f * n.stride if n.kind in KERNEL_KINDS else f
    return factor[block.exit]


@dataclass(frozen=True)
class BlockInterface:
    in_shape: tuple
    out_shape: tuple
    downsampling: int

    def describe(self) -> str:
        return f"in={self.in_shape} out={self.out_shape} downsampling={self.downsampling}"


# --- the model --------------------------------------------------------------------------


def init_params(node: LayerSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """He-style uniform fan-in initialisation for weights; zero biases; identity batch norm."""
    shapes = node.param_shapes()
    if node.kind in ("conv", "linear"):
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return {
            "weight": rng.uniform(-bound, bound, size=wshape).astype(np.float32),
            "bias": np.zeros(shapes["bias"], dtype=np.float32),
        }
    if node.kind == "batchnorm":
        c = shapes["gamma"]
        return {
            "gamma": np.ones(c, np.float32),
            "beta": np.zeros(c, np.float32),
            "running_mean": np.zeros(c, np.float32),
            "running_var": np.ones(c, np.float32),
        }
    return {}


def init_block_params(block: BlockSpec, rng: np.random.Generator) -> Dict[str, Dict[str, np.ndarray]]:
    return {n.id: init_params(n, rng) for n in block.nodes if n.has_params}


@dataclass
class Trace:
    """Result of :meth:`ModelGraph.run`: output, tapped block exits and parameter leaves."""

    output: Tensor
    taps: Dict[str, Tensor] = field(default_factory=dict)
    leaves: Dict[Tuple[str, str], Tensor] = field(default_factory=dict)

    def grads(self) -> Dict[Tuple[str, str], np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.leaves.items()}


class ModelGraph:
    """Ordered feature blocks followed by exactly one classifier block, plus a parameter store."""

    def __init__(
        self,
        blocks: Sequence[BlockSpec],
        params: Mapping[str, Mapping[str, np.ndarray]],
        input_shape: Sequence[int],
        num_classes: int,
        frozen: Iterable[str] = (),
    ):
        self.blocks: Tuple[BlockSpec, ...] = tuple(blocks)
        self.params: Dict[str, Dict[str, np.ndarray]] = {k: dict(v) for k, v in params.items()}
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.frozen = set(frozen)
        self._validate()

    # -- construction checks

    def _validate(self) -> None:
        if not self.blocks or self.blocks[-1].role != "classifier":
            raise GraphError("the last block must be the classifier")
        if sum(b.role == "classifier" for b in self.blocks) != 1:
            raise GraphError("a model has exactly one classifier block")
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise GraphError(f"duplicate block names in {names}")
        ids = [n.id for b in self.blocks for n in b.nodes]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise GraphError(f"node ids must be unique across the model, repeated: {sorted(dup)}")

        self.shapes: Dict[str, tuple] = {}
        self.block_in: Dict[str, tuple] = {}
        shape = self.input_shape
        for b in self.blocks:
            self.block_in[b.name] = shape
            s = infer_block_shapes(b, shape)
            if b.role == "feature_block" and len(s[b.exit]) != 3:
                raise GraphError(f"feature block {b.name!r} must produce an image tensor, got {s[b.exit]}")
            s.pop(ENTRY)
            self.shapes.update(s)
            shape = s[b.exit]
        if shape != (self.num_classes,):
            raise GraphError(f"classifier produces extent {shape}, expected ({self.num_classes},)")

        param_ids = set()
        for b in self.blocks:
            for n in b.nodes:
                if not n.has_params:
                    continue
                param_ids.add(n.id)
                stored = self.params.get(n.id)
                if stored is None:
                    raise GraphError(f"node {n.id!r} has no parameter entry")
                want = n.param_shapes()
                if set(stored) != set(want):
                    raise GraphError(f"node {n.id!r}: parameter names {sorted(stored)} != {sorted(want)}")
                for pname, shp in want.items():
                    if tuple(stored[pname].shape) != shp:
                        raise GraphError(f"node {n.id!r}: {pname} has extent {stored[pname].shape}, expected {shp}")
                    if stored[pname].dtype != np.float32:
                        stored[pname] = stored[pname].astype(np.float32)
        stray = set(self.params) - param_ids
        if stray:
            raise GraphError(f"parameter entries for unknown nodes: {sorted(stray)}")
        if not self.frozen <= param_ids:
            raise GraphError(f"cannot freeze non-parameterised or unknown nodes: {sorted(self.frozen - param_ids)}")

    # -- lookups

    @property
    def feature_blocks(self) -> Tuple[BlockSpec, ...]:
        return self.blocks[:-1]

    @property
    def classifier(self) -> BlockSpec:
        return self.blocks[-1]

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise GraphError(f"unknown block {name!r}; blocks are {[b.name for b in self.blocks]}")

    def block_index(self, name: str) -> int:
        return self.blocks.index(self.block(name))

    def node_ids(self) -> List[str]:
        return [n.id for b in self.blocks for n in b.nodes]

    def parameterized_ids(self) -> List[str]:
        return [n.id for b in self.blocks for n in b.nodes if n.has_params]

    def block_output_shape(self, name: str) -> tuple:
        return self.shapes[self.block(name).exit]

    def interface(self, names: Sequence[str]) -> BlockInterface:
        """Interface of a contiguous run of blocks taken as one unit."""
        names = list(names)
        idx = [self.block_index(n) for n in names]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise GraphError(f"blocks {names} are not contiguous and in model order")
        factor = 1
        for n in names:
            factor *= block_downsampling(self.block(n))
        return BlockInterface(self.block_in[names[0]], self.block_output_shape(names[-1]), factor)

    # -- execution

    def run(
        self,
        x,
        train: bool = False,
        until: Optional[str] = None,
        taps: Iterable[str] = (),
        trainable: Optional[Iterable[str]] = None,
    ) -> Trace:
        """Execute blocks in order.

        ``train`` switches batch norm of non-frozen nodes to batch statistics and
        makes parameters of ``trainable`` nodes (default: all non-frozen) gradient
        leaves. Frozen batch-norm nodes always use running statistics. ``until``
        stops after the named block; ``taps`` records block exits.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input extent {tuple(x.shape[1:])} does not match model input {self.input_shape}")
        if until is not None:
            self.block(until)
        taps = set(taps)
        for t in taps:
            self.block(t)
        if trainable is None:
            trainable = set(self.parameterized_ids()) - self.frozen if train else set()
        else:
            trainable = set(trainable)
        trace = Trace(output=x)
        h = x
        for b in self.blocks:
            h = self._run_block(b, h, train, trainable, trace.leaves)
            if b.name in taps:
                trace.taps[b.name] = h
            if b.name == until:
                break
        trace.output = h
        return trace

    def _leaf(self, node_id: str, pname: str, trainable: set, leaves: dict) -> Tensor:
        arr = self.params[node_id][pname]
        if node_id in trainable:
            t = Tensor(arr, requires_grad=True)
            leaves[(node_id, pname)] = t
            return t
        return Tensor(arr)

    def _run_block(self, block: BlockSpec, x: Tensor, train: bool, trainable: set, leaves: dict) -> Tensor:
        vals = {ENTRY: x}
        for n in block.nodes:
            ins = [vals[s] for s in n.inputs]
            k = n.kind
            if k == "conv":
                out = ops.conv2d(
                    ins[0],
                    self._leaf(n.id, "weight", trainable, leaves),
                    self._leaf(n.id, "bias", trainable, leaves),
                    stride=n.stride,
                    padding=n.padding,
                )
            elif k == "batchnorm":
                p = self.params[n.id]
                live = train and n.id not in self.frozen
                out = ops.batchnorm(
                    ins[0],
                    self._leaf(n.id, "gamma", trainable, leaves),
                    self._leaf(n.id, "beta", trainable, leaves),
                    p["running_mean"],
                    p["running_var"],
                    training=live,
                    eps=n.eps,
                    momentum=n.momentum,
                )
            elif k == "relu":
                out = ops.relu(ins[0])
            elif k == "maxpool":
                out = ops.maxpool2d(ins[0], n.kernel, n.stride, n.padding)
            elif k == "avgpool":
                out = ops.avgpool2d(ins[0], n.kernel, n.stride, n.padding)
            elif k == "global_avgpool":
                out = ops.global_avgpool(ins[0])
            elif k == "flatten":
                out = ops.flatten(ins[0])
            elif k == "linear":
                out = ops.linear(
                    ins[0], self._leaf(n.id, "weight", trainable, leaves), self._leaf(n.id, "bias", trainable, leaves)
                )
            elif k == "concat":
                out = ops.concat_channels(ins)
            else:
                out = ins[0]
                for other in ins[1:]:
                    out = ops.add(out, other)
            vals[n.id] = out
        return vals[block.exit]

    def forward(self, x, mode: str = "infer") -> Tensor:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return self.run(x, train=mode == "train").output

    def forward_to_block(self, x, block_name: str) -> Tensor:
        """Exit tensor of ``block_name`` in inference mode; no later block runs."""
        return self.run(x, until=block_name).output

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(images[i:i + batch_size]).data.argmax(axis=1) for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- surgery

    def copy(self) -> "ModelGraph":
        params = {k: {p: a.copy() for p, a in v.items()} for k, v in self.params.items()}
        return ModelGraph(self.blocks, params, self.input_shape, self.num_classes, self.frozen)

    def replace_block(self, block_name: str, new_block: BlockSpec, new_params) -> "ModelGraph":
        return self.replace_blocks([block_name], new_block, new_params)

    def replace_blocks(self, names: Sequence[str], new_block: BlockSpec, new_params) -> "ModelGraph":
        """Splice ``new_block`` in place of the contiguous blocks ``names``.

        The new block must expose the same input/output extents and downsampling
        factor. Parameters outside the replaced blocks are copied unchanged; the
        replaced blocks' parameters are dropped.
        """
        names = list(names)
        old = self.interface(names)
        if new_block.role != "feature_block" or any(self.block(n).role != "feature_block" for n in names):
            raise GraphError("only feature blocks can be replaced")
        try:
            out_shapes = infer_block_shapes(new_block, old.in_shape)
            new = BlockInterface(old.in_shape, out_shapes[new_block.exit], block_downsampling(new_block))
        except ShapeError as exc:
            raise InterfaceMismatchError(
                f"replacement {new_block.name!r} does not accept the input of {names}: {exc}\n"
                f"  expected: {old.describe()}"
            ) from exc
        if new.out_shape != old.out_shape or new.downsampling != old.downsampling:
            raise InterfaceMismatchError(
                f"replacement {new_block.name!r} does not match the interface of {names}:\n"
                f"  expected: {old.describe()} (out channels {old.out_shape[0]})\n"
                f"  actual:   {new.describe()} (out channels {new.out_shape[0]})"
            )
        first = self.block_index(names[0])
        removed = {n.id for name in names for n in self.block(name).nodes}
        blocks = self.blocks[:first] + (new_block,) + self.blocks[first + len(names):]
        params = {k: {p: a.copy() for p, a in v.items()} for k, v in self.params.items() if k not in removed}
        for k, v in new_params.items():
            params[k] = {p: np.array(a, dtype=np.float32, copy=True) for p, a in v.items()}
        return ModelGraph(blocks, params, self.input_shape, self.num_classes, self.frozen - removed)

    # -- freezing and accounting

    def _check_ids(self, node_ids: Iterable[str]) -> set:
        ids = set(node_ids)
        known = set(self.parameterized_ids())
        unknown = ids - known
        if unknown:
            raise GraphError(f"unknown or parameter-free node ids: {sorted(unknown)}")
        return ids

    def freeze(self, node_ids: Iterable[str]) -> None:
        self.frozen |= self._check_ids(node_ids)

    def unfreeze(self, node_ids: Iterable[str]) -> None:
        self.frozen -= self._check_ids(node_ids)

    def freeze_all_except(self, node_ids: Iterable[str]) -> None:
        keep = self._check_ids(node_ids)
        self.frozen = set(self.parameterized_ids()) - keep

    def param_count(self) -> int:
        """Number of stored parameter values, batch-norm running statistics included."""
        return int(sum(a.size for v in self.params.values() for a in v.values()))

    def param_bytes(self) -> int:
        return 4 * self.param_count()

    def conv_count(self, feature_only: bool = True) -> int:
        blocks = self.feature_blocks if feature_only else self.blocks
        return sum(n.kind == "conv" for b in blocks for n in b.nodes)

    # -- identity

    def structure(self) -> dict:
        return {
            "input": list(self.input_shape),
            "classes": self.num_classes,
            "blocks": [b.to_dict() for b in self.blocks],
            "frozen": sorted(self.frozen),
        }

    def structure_text(self) -> str:
        return json.dumps(self.structure(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """SHA-256 over the structure and every parameter array."""
        h = hashlib.sha256(self.structure_text().encode())
        for node_id in self.parameterized_ids():
            for pname in sorted(self.params[node_id]):
                arr = np.ascontiguousarray(self.params[node_id][pname], dtype="<f4")
                h.update(f"{node_id}.{pname}{arr.shape}".encode())
                h.update(arr.tobytes())
        return h.hexdigest()

    def params_digest(self, node_ids: Iterable[str]) -> str:
        h = hashlib.sha256()
        for node_id in sorted(node_ids):
            for pname in sorted(self.params[node_id]):
                h.update(f"{node_id}.{pname}".encode())
                h.update(np.ascontiguousarray(self.params[node_id][pname], dtype="<f4").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, ModelGraph) and self.digest() == other.digest()

    __hash__ = None

    @classmethod
    def from_structure(cls, structure: Mapping, params) -> "ModelGraph":
        blocks = [BlockSpec.from_dict(b) for b in structure["blocks"]]
        return cls(blocks, params, structure["input"], structure["classes"], structure.get("frozen", ()))


def clone_params(params) -> Dict[str, Dict[str, np.ndarray]]:
    return copy.deepcopy({k: dict(v) for k, v in params.items()})
