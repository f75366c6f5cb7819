"""Static peak-memory analysis over feature buffers.

At each node the live footprint is split into the buffers the node reads
(``m_input``), the buffer it allocates (``m_output``; zero when it writes in
place) and every other buffer still awaited by a later node or held as a
graph output (``m_kept``). Parameters are tallied separately as ``m_net``
and never enter the peak.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .graph import BufferPolicy, CountingAllocator, Graph, run
from .tensor import BnParams, ConvWeights

CSV_HEADER = ["node_id", "kind", "m_input", "m_output", "m_kept", "total",
              "m_input_bytes", "m_output_bytes", "m_kept_bytes", "total_bytes", "m_net", "m_net_bytes"]
FEATURES_ONLY_NOTE = ("feature buffers only; conv workspace (im2col scratch) is not modelled and parameter memory "
                      "(m_net) is reported separately, excluded from the peak")


@dataclass
class NodeMemory:
    node_id: str
    kind: str
    m_input: int
    m_output: int
    m_kept: int

    @property
    def total(self) -> int:
        return self.m_input + self.m_output + self.m_kept


@dataclass
class MemoryReport:
    per_node: list[NodeMemory] = field(default_factory=list)
    bytes_per_scalar: int = 4
    m_net: int = 0  # parameter count, not part of the peak

    @property
    def peak_elements(self) -> int:
        return max((n.total for n in self.per_node), default=0)

    @property
    def peak_bytes(self) -> int:
        return self.peak_elements * self.bytes_per_scalar

    @property
    def peak_node_id(self) -> str | None:
        if not self.per_node:
            return None
        return max(self.per_node, key=lambda n: n.total).node_id

    @property
    def m_net_bytes(self) -> int:
        return self.m_net * self.bytes_per_scalar

    def nodes_at_peak(self) -> list[str]:
        peak = self.peak_elements
        return [n.node_id for n in self.per_node if n.total == peak]


def plan_memory(g: Graph, input_shape=None, policy: BufferPolicy | None = None,
                bytes_per_scalar: int = 4) -> MemoryReport:
    """Simulate execution with reference-counted buffers and record each node's footprint."""
    policy = policy or BufferPolicy()
    shapes = g.infer_shapes(input_shape)
    size = {t: int(np.prod(s)) for t, s in shapes.items()}
    remaining = {t: len(c) for t, c in g.consumers().items()}
    outputs = set(g.outputs)
    # tensor id -> buffer id; in-place nodes alias their input's buffer
    buffer_of: dict[str, str] = {t: t for t in g.inputs}
    buffer_size: dict[str, int] = {t: size[t] for t in g.inputs}
    holders: dict[str, set[str]] = {t: {t} for t in g.inputs}
    report = MemoryReport(bytes_per_scalar=bytes_per_scalar)

    for node in g.nodes:
        first = node.inputs[0]
        inplace = (
            policy.may_inplace(node.kind)
            and remaining[first] == 1
            and first not in outputs
            and node.inputs.count(first) == 1
            and size[first] == size[node.id]
        )
        in_bufs = {buffer_of[t] for t in node.inputs}
        m_input = sum(buffer_size[b] for b in in_bufs)
        m_output = 0 if inplace else size[node.id]
        m_kept = sum(s for b, s in buffer_size.items() if b not in in_bufs)
        report.per_node.append(NodeMemory(node.id, node.kind, m_input, m_output, m_kept))

        if inplace:
            buf = buffer_of[first]
        else:
            buf = node.id
            buffer_size[buf] = size[node.id]
            holders[buf] = set()
        buffer_of[node.id] = buf
        holders[buf].add(node.id)
        for t in set(node.inputs):
            remaining[t] -= node.inputs.count(t)
            if remaining[t] == 0 and t not in outputs:
                b = buffer_of[t]
                holders[b].discard(t)
                if not holders[b]:
                    del buffer_size[b]
        if remaining[node.id] == 0 and node.id not in outputs:
            holders[buf].discard(node.id)
            if not holders[buf]:
                del buffer_size[buf]

    report.m_net = sum(
        sum(a.size for a in p.arrays().values()) for p in g.params.values()
        if isinstance(p, (ConvWeights, BnParams))
    )
    return report


def measure_peak(g: Graph, x: np.ndarray, policy: BufferPolicy | None = None) -> CountingAllocator:
    """Execute ``g`` on ``x`` with buffer freeing and in-place kernels, counting live elements."""
    alloc = CountingAllocator()
    run(g, {g.inputs[0]: x}, keep=False, policy=policy or BufferPolicy(), allocator=alloc)
    return alloc


def report_csv(r: MemoryReport) -> str:
    """One row per node, then a ``SUMMARY`` row whose ``kind`` names the peak node."""
    bps = r.bytes_per_scalar
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    for n in r.per_node:
        wr.writerow([n.node_id, n.kind, n.m_input, n.m_output, n.m_kept, n.total,
                     n.m_input * bps, n.m_output * bps, n.m_kept * bps, n.total * bps, "", ""])
    wr.writerow(["SUMMARY", r.peak_node_id or "", "", "", "", r.peak_elements,
                 "", "", "", r.peak_bytes, r.m_net, r.m_net_bytes])
    return buf.getvalue()
