"""Wall-clock benchmarking: warm-up plus averaged runs, and differential per-op timing."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import Graph, count_ops, forward
from .tensor import ConvWeights


@contextmanager
def threads(n: int | None):
    """Limit BLAS/OpenMP pools to ``n`` threads for the duration of the block."""
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


@dataclass
class Timing:
    mean_ms: float
    std_ms: float
    runs: int

    def as_dict(self):
        return {"mean_ms": self.mean_ms, "std_ms": self.std_ms, "runs": self.runs}


def bench(g: Graph, input_shape=None, warmup_runs: int = 2, timed_runs: int = 10, seed: int = 0,
          n_threads: int | None = 1) -> Timing:
    if timed_runs < 1:
        raise ConfigError("timed_runs must be >= 1")
    shape = tuple(input_shape or g.shapes[g.inputs[0]])
    x = np.random.default_rng(seed).random(shape).astype(g.dtype)
    times = []
    with threads(n_threads):
        for _ in range(warmup_runs):
            forward(g, x)
        for _ in range(timed_runs):
            t0 = time.perf_counter()
            forward(g, x)
            times.append((time.perf_counter() - t0) * 1e3)
    t = np.asarray(times)
    return Timing(float(t.mean()), float(t.std()), timed_runs)


@dataclass
class OpTiming:
    op: str
    repeats: int
    t_base_ms: float
    t_new_ms: float
    ms_per_op: float
    flops: int

    @property
    def flops_per_ms(self) -> float:
        return self.flops / self.ms_per_op if self.ms_per_op > 0 else float("inf")


def append_ops(base: Graph, in_ch: int, out_ch: int, k: int, repeats: int, seed: int = 0,
               identity: bool = False) -> Graph:
    """Copy ``base`` and add ``repeats`` k x k convs at its output.

    Width-preserving ops are chained; others all read the base output
    (fan-out), and the last one becomes the graph output.
    """
    g = base.copy()
    rng = np.random.default_rng(seed)
    src = g.outputs.pop()
    if g.shapes[src][1] != in_ch:
        raise ShapeError(f"cannot append a {in_ch}-input conv to a {g.shapes[src][1]}-channel output")
    if identity and in_ch != out_ch:
        raise ShapeError("an identity conv must preserve the channel count")
    y = src
    for i in range(repeats):
        if identity:
            kern = np.zeros((out_ch, in_ch, k, k), g.dtype)
            kern[np.arange(out_ch), np.arange(out_ch), k // 2, k // 2] = 1
        else:
            kern = rng.normal(0, np.sqrt(2 / (in_ch * k * k)), (out_ch, in_ch, k, k)).astype(g.dtype)
        inp = y if in_ch == out_ch else src
        y = g.add_node("conv", inp, name=f"probe{i}", params=ConvWeights(kern, np.zeros(out_ch, g.dtype)))
    g.mark_output(y)
    return g


def per_op_timing(base: Graph, in_ch: int, out_ch: int, k: int, repeats: int = 10, input_shape=None,
                  warmup_runs: int = 2, timed_runs: int = 10, n_threads: int | None = 1,
                  identity: bool = False) -> OpTiming:
    """(t_new - t_base) / repeats, where t_new times ``base`` with the op appended ``repeats`` times."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    probe = append_ops(base, in_ch, out_ch, k, repeats, identity=identity)
    tb = bench(base, input_shape, warmup_runs, timed_runs, n_threads=n_threads)
    tn = bench(probe, input_shape, warmup_runs, timed_runs, n_threads=n_threads)
    shape = input_shape or base.shapes[base.inputs[0]]
    macs = count_ops(probe, shape).conv_macs - count_ops(base, shape).conv_macs
    return OpTiming(f"conv{k}x{k} {in_ch}->{out_ch}", repeats, tb.mean_ms, tn.mean_ms,
                    (tn.mean_ms - tb.mean_ms) / repeats, 2 * macs // repeats)


def conv_base(width: int, hw=(64, 64), depth: int = 10, dtype=np.float32, seed: int = 0) -> Graph:
    """A plain stack of ``depth`` 3x3 convs at ``width`` channels, the base for differential timing."""
    rng = np.random.default_rng(seed)
    g = Graph(dtype)
    y = g.add_input("x", (1, width, *hw))
    for i in range(depth):
        kern = rng.normal(0, np.sqrt(2 / (width * 9)), (width, width, 3, 3)).astype(dtype)
        y = g.add_node("conv", y, name=f"base{i}", params=ConvWeights(kern, np.zeros(width, dtype)))
    g.mark_output(y)
    return g
