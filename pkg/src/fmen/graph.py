"""Computation-graph IR, reference executor, and static counters.

A :class:`Graph` is an ordered list of nodes already in topological order:
a node may only consume tensors that exist when it is added, so cycles are
impossible by construction. Each node produces exactly one tensor whose id
equals the node id. Parameters live in ``Graph.params`` keyed by node id so
that re-parameterization passes can rewrite them without touching topology.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, FmenError, ShapeError
from .tensor import BnParams, ConvWeights

KINDS = ("conv", "leaky_relu", "sigmoid", "bn", "add", "mul", "concat", "pixel_shuffle")
UNARY = {"conv", "leaky_relu", "sigmoid", "bn", "pixel_shuffle"}
POINTWISE_UNARY = {"leaky_relu", "sigmoid"}


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)

    @property
    def output(self) -> str:
        return self.id


class Graph:
    def __init__(self, dtype=T.DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.shapes: dict[str, tuple[int, int, int, int]] = {}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.params: dict[str, ConvWeights | BnParams] = {}
        self.meta: dict = {}
        self._index: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, inputs={self.inputs}, outputs={self.outputs})"

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise KeyError(f"no node {node_id!r}") from None

    def has_tensor(self, tid: str) -> bool:
        return tid in self.shapes

    def add_input(self, name: str, shape) -> str:
        shape = tuple(int(s) for s in shape)
        if len(shape) != 4 or min(shape) < 1:
            raise ShapeError(f"graph input shape must be 4-D and positive, got {shape}")
        if name in self.shapes:
            raise ConfigError(f"tensor id {name!r} already exists")
        self.inputs.append(name)
        self.shapes[name] = shape
        return name

    def add_node(self, kind: str, inputs: Iterable[str] | str, name: str | None = None,
                 params: ConvWeights | BnParams | None = None, **attrs) -> str:
        """Append a node, infer its output shape, and return its tensor id."""
        if kind not in KINDS:
            raise ConfigError(f"unknown node kind {kind!r}")
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        for tid in inputs:
            if tid not in self.shapes:
                raise ShapeError(f"{kind}: input tensor {tid!r} does not exist yet")
        name = name or f"{kind}_{len(self.nodes)}"
        if name in self.shapes:
            raise ConfigError(f"tensor id {name!r} already exists")
        if kind == "conv" and params is not None:
            attrs.setdefault("k", params.k)
            attrs.setdefault("in_ch", params.in_ch)
            attrs.setdefault("out_ch", params.out_ch)
        if kind == "bn" and params is not None:
            attrs.setdefault("channels", params.channels)
        node = Node(name, kind, inputs, attrs)
        shape = _infer(node, [self.shapes[t] for t in inputs])
        if kind == "conv" and attrs.get("pad_from") is not None:
            src = attrs["pad_from"]
            if src not in self._index or self.node(src).kind not in ("conv", "bn"):
                raise ConfigError(f"pad_from must name an earlier conv or bn node, got {src!r}")
        self._index[name] = len(self.nodes)
        self.nodes.append(node)
        self.shapes[name] = shape
        if params is not None:
            self.params[name] = params
        return name

    def mark_output(self, tid: str) -> None:
        if tid not in self.shapes:
            raise ShapeError(f"unknown tensor {tid!r}")
        self.outputs.append(tid)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {t: [] for t in self.shapes}
        for n in self.nodes:
            for t in n.inputs:
                out[t].append(n.id)
        return out

    def copy(self) -> "Graph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Graph":
        g = self.copy()
        g.dtype = np.dtype(dtype)
        g.params = {k: p.astype(dtype) for k, p in self.params.items()}
        return g

    def infer_shapes(self, input_shapes=None) -> dict[str, tuple[int, int, int, int]]:
        """Re-run shape inference for new input shapes (tuple for single-input graphs)."""
        if input_shapes is None:
            return dict(self.shapes)
        if not isinstance(input_shapes, dict):
            if len(self.inputs) != 1:
                raise ShapeError("pass a dict of input shapes for multi-input graphs")
            input_shapes = {self.inputs[0]: input_shapes}
        shapes: dict[str, tuple] = {}
        for tid in self.inputs:
            shp = tuple(int(s) for s in input_shapes[tid])
            if len(shp) != 4 or shp[1] != self.shapes[tid][1]:
                raise ShapeError(f"input {tid!r}: expected (n, {self.shapes[tid][1]}, h, w), got {shp}")
            shapes[tid] = shp
        for n in self.nodes:
            shapes[n.id] = _infer(n, [shapes[t] for t in n.inputs])
        return shapes

    def to_json(self) -> dict:
        return {
            "format": "fmen-graph",
            "version": 1,
            "dtype": self.dtype.name,
            "meta": self.meta,
            "inputs": [{"id": t, "shape": list(self.shapes[t])} for t in self.inputs],
            "outputs": list(self.outputs),
            "nodes": [
                {"id": n.id, "kind": n.kind, "inputs": n.inputs, "attrs": n.attrs,
                 "shape": list(self.shapes[n.id])}
                for n in self.nodes
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def from_json(cls, doc: dict | str) -> "Graph":
        """Rebuild topology and shapes (parameters are not part of the JSON document)."""
        if isinstance(doc, str):
            doc = json.loads(doc)
        if doc.get("format") != "fmen-graph":
            raise ConfigError("not an fmen-graph document")
        g = cls(doc.get("dtype", "float32"))
        g.meta = doc.get("meta", {})
        for inp in doc["inputs"]:
            g.add_input(inp["id"], inp["shape"])
        for nd in doc["nodes"]:
            tid = g.add_node(nd["kind"], nd["inputs"], name=nd["id"], **nd.get("attrs", {}))
            if "shape" in nd and tuple(nd["shape"]) != g.shapes[tid]:
                raise ShapeError(f"node {tid!r}: declared shape {nd['shape']} != inferred {g.shapes[tid]}")
        for t in doc["outputs"]:
            g.mark_output(t)
        return g


def _infer(node: Node, shapes: list[tuple]) -> tuple[int, int, int, int]:
    k, a = node.kind, node.attrs
    if k in UNARY and len(shapes) != 1:
        raise ShapeError(f"{k} takes exactly one input, got {len(shapes)}")
    if k in ("add", "mul") and len(shapes) != 2:
        raise ShapeError(f"{k} takes exactly two inputs, got {len(shapes)}")
    if k == "concat" and len(shapes) < 2:
        raise ShapeError("concat takes at least two inputs")
    if k == "conv":
        n, c, h, w = shapes[0]
        if a.get("k") not in (1, 3):
            raise ConfigError(f"conv kernel size must be 1 or 3, got {a.get('k')}")
        if c != a["in_ch"]:
            raise ShapeError(f"conv {node.id}: input has {c} channels, expected {a['in_ch']}")
        return (n, a["out_ch"], h, w)
    if k == "bn":
        if "channels" in a and shapes[0][1] != a["channels"]:
            raise ShapeError(f"bn {node.id}: channel mismatch")
        return shapes[0]
    if k in POINTWISE_UNARY:
        return shapes[0]
    if k in ("add", "mul"):
        if shapes[0] != shapes[1]:
            raise ShapeError(f"{k} {node.id}: shape mismatch {shapes[0]} vs {shapes[1]}")
        return shapes[0]
    if k == "concat":
        base = shapes[0]
        for s in shapes[1:]:
            if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
                raise ShapeError(f"concat {node.id}: non-channel dims differ")
        return (base[0], sum(s[1] for s in shapes), base[2], base[3])
    if k == "pixel_shuffle":
        n, c, h, w = shapes[0]
        s = a["scale"]
        if c % (s * s):
            raise ShapeError(f"pixel_shuffle {node.id}: {c} channels not divisible by {s * s}")
        return (n, c // (s * s), h * s, w * s)
    raise ConfigError(f"unknown node kind {k!r}")


# execution ---------------------------------------------------------------


@dataclass
class BufferPolicy:
    """Which nodes may write their result into their input's buffer."""

    inplace_activations: bool = True
    inplace_elementwise: bool = False

    @property
    def conv_shares_io(self) -> bool:
        return False

    def may_inplace(self, kind: str) -> bool:
        if kind in POINTWISE_UNARY:
            return self.inplace_activations
        if kind in ("add", "mul"):
            return self.inplace_elementwise
        return False


class CountingAllocator:
    """Measures the live feature-buffer footprint of a real execution.

    Buffers are identified by the memory they occupy, so an in-place kernel
    that hands back its input array is not counted twice.
    """

    def __init__(self):
        self.live: dict[str, np.ndarray] = {}
        self.high_water = 0
        self.high_water_node: str | None = None
        self.trace: list[tuple[str, int]] = []

    def _footprint(self) -> int:
        seen: list[np.ndarray] = []
        total = 0
        for arr in self.live.values():
            if any(np.shares_memory(arr, s) for s in seen):
                continue
            seen.append(arr)
            total += arr.size
        return total

    def bind(self, tid: str, arr: np.ndarray) -> None:
        self.live[tid] = arr

    def observe(self, node_id: str) -> None:
        now = self._footprint()
        self.trace.append((node_id, now))
        if now > self.high_water:
            self.high_water, self.high_water_node = now, node_id

    def release(self, tid: str) -> None:
        self.live.pop(tid, None)


@dataclass
class ExecutionRecord:
    values: dict[str, np.ndarray]
    bn_stats: dict[str, T.BnBatchStats] = field(default_factory=dict)
    bn_updates: dict[str, BnParams] = field(default_factory=dict)
    pad_values: dict[str, np.ndarray] = field(default_factory=dict)


def pad_vector(g: Graph, node: Node, record: ExecutionRecord | None = None):
    """Border value the conv ``node`` pads its input with (None means zero)."""
    src = node.attrs.get("pad_from")
    if src is None:
        return None
    p = g.params[src]
    if isinstance(p, ConvWeights):
        return p.bias
    if record is not None and src in record.bn_stats:
        st = record.bn_stats[src]
        return p.beta - p.gamma * st.mean * st.inv_std(p.eps)
    return p.scale_shift()[1]


def _require_params(g: Graph, node: Node):
    try:
        return g.params[node.id]
    except KeyError:
        raise FmenError(f"node {node.id!r} ({node.kind}) has no parameters attached") from None


def run(g: Graph, feeds: dict[str, np.ndarray], *, training: bool = False, momentum: float = 0.1,
        keep: bool = True, policy: BufferPolicy | None = None,
        allocator: CountingAllocator | None = None, order: list[int] | None = None) -> ExecutionRecord:
    """Evaluate ``g`` and return every intermediate (``keep``) or just the outputs.

    With ``keep=False`` dead tensors are dropped as soon as their last
    consumer has run and pointwise nodes run in place when ``policy`` allows.
    """
    missing = [t for t in g.inputs if t not in feeds]
    if missing:
        raise FmenError(f"missing feeds for graph inputs {missing}")
    policy = policy or BufferPolicy()
    values: dict[str, np.ndarray] = {}
    rec = ExecutionRecord(values)
    for t in g.inputs:
        # private copy: in-place kernels must never write into the caller's array
        x = T.as_tensor(np.array(feeds[t], dtype=g.dtype, copy=True))
        if x.shape[1] != g.shapes[t][1]:
            raise ShapeError(f"feed {t!r}: expected {g.shapes[t][1]} channels, got {x.shape[1]}")
        values[t] = x
        if allocator is not None:
            allocator.bind(t, x)
    remaining = {t: len(c) for t, c in g.consumers().items()}
    outputs = set(g.outputs)
    nodes = g.nodes if order is None else [g.nodes[i] for i in order]
    for node in nodes:
        for t in node.inputs:
            if t not in values:
                raise FmenError(f"order is not topological: {node.id} runs before {t}")
        args = [values[t] for t in node.inputs]
        inplace = (
            not keep
            and policy.may_inplace(node.kind)
            and remaining[node.inputs[0]] == 1
            and node.inputs[0] not in outputs
            and node.inputs.count(node.inputs[0]) == 1
        )
        out = _eval(g, node, args, rec, training, momentum, inplace)
        values[node.id] = out
        if allocator is not None:
            allocator.bind(node.id, out)
            allocator.observe(node.id)
        for t in set(node.inputs):
            remaining[t] -= node.inputs.count(t)
            if not keep and remaining[t] == 0 and t not in outputs:
                del values[t]
                if allocator is not None:
                    allocator.release(t)
    return rec


def _eval(g, node, args, rec, training, momentum, inplace):
    k, a = node.kind, node.attrs
    x = args[0]
    if k == "conv":
        return T.conv2d(x, _require_params(g, node), pad_value=pad_vector(g, node, rec))
    if k == "leaky_relu":
        return T.leaky_relu(x, a.get("slope", T.DEFAULT_SLOPE), out=x if inplace else None)
    if k == "sigmoid":
        return T.sigmoid(x, out=x if inplace else None)
    if k == "bn":
        p = _require_params(g, node)
        if training:
            y, new, stats = T.batch_norm_train(x, p, momentum, return_stats=True)
            rec.bn_stats[node.id] = stats
            rec.bn_updates[node.id] = new
            return y
        return T.batch_norm_infer(x, p)
    if k in ("add", "mul"):
        return T.elementwise(x, args[1], k, out=x if inplace else None)
    if k == "concat":
        return np.concatenate(args, axis=1)
    if k == "pixel_shuffle":
        return T.pixel_shuffle(x, a["scale"])
    raise ConfigError(f"cannot execute node kind {k!r}")


def execute(g: Graph, feeds, **kw) -> dict[str, np.ndarray]:
    """Run ``g`` on ``feeds`` (dict, or a bare array for single-input graphs)."""
    if not isinstance(feeds, dict):
        feeds = {g.inputs[0]: feeds}
    rec = run(g, feeds, keep=False, **kw)
    return {t: rec.values[t] for t in g.outputs}


def forward(g: Graph, x: np.ndarray, **kw) -> np.ndarray:
    """Single-input, single-output convenience wrapper around :func:`execute`."""
    return execute(g, {g.inputs[0]: x}, **kw)[g.outputs[0]]


# counting ------------------------------------------------------------------


@dataclass
class OpCountReport:
    additions: int = 0
    multiplications: int = 0
    concatenations: int = 0
    group_convs: int = 0
    convs_1x1: int = 0
    convs_3x3: int = 0
    total_convs: int = 0
    activation_elements: int = 0
    conv_macs: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def count_ops(g: Graph, input_shape=None) -> OpCountReport:
    shapes = g.infer_shapes(input_shape)
    r = OpCountReport()
    for n in g.nodes:
        if n.kind == "add":
            r.additions += 1
        elif n.kind == "mul":
            r.multiplications += 1
        elif n.kind == "concat":
            r.concatenations += 1
        elif n.kind == "conv":
            kk = n.attrs["k"]
            if kk == 1:
                r.convs_1x1 += 1
            else:
                r.convs_3x3 += 1
            out = shapes[n.id]
            numel = int(np.prod(out))
            r.activation_elements += numel
            r.conv_macs += numel * n.attrs["in_ch"] * kk * kk
    r.total_convs = r.convs_1x1 + r.convs_3x3
    return r


def param_count(g: Graph) -> int:
    """Number of learnable scalars: conv kernels and biases, BN gamma and beta."""
    total = 0
    for n in g.nodes:
        if n.kind not in ("conv", "bn"):
            continue
        p = _require_params(g, n)
        if isinstance(p, ConvWeights):
            total += p.kernel.size + p.bias.size
        else:
            total += p.gamma.size + p.beta.size
    return total
