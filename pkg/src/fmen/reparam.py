"""Structural re-parameterization: fold BN, collapse RRRBs, check equivalence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PatternError, ShapeError
from .graph import Graph, forward
from .tensor import BnParams, ConvWeights


def fold_bn_into_following_conv(bn: BnParams, conv: ConvWeights) -> ConvWeights:
    """Absorb an inference-mode BN that feeds ``conv`` into the conv itself.

    The result equals ``conv(BN(x))`` everywhere when the reference conv pads
    with the BN's response to zero (``bn.scale_shift()[1]``), and on interior
    pixels when it pads with plain zeros.
    """
    if bn.channels != conv.in_ch:
        raise ShapeError(f"BN has {bn.channels} channels but conv expects {conv.in_ch} inputs")
    a, c = bn.scale_shift()
    kernel = conv.kernel * a[None, :, None, None]
    bias = conv.bias + np.einsum("oiuv,i->o", conv.kernel, c)
    return ConvWeights(kernel, bias, conv.padding)


def fuse_rrrb(expand: ConvWeights, fea: ConvWeights, reduce: ConvWeights) -> ConvWeights:
    """Collapse ``reduce(fea(e) + e) + x`` with ``e = expand(x)`` into one 3x3 conv."""
    c, rc = expand.in_ch, expand.out_ch
    if (expand.k, fea.k, reduce.k) != (1, 3, 1):
        raise ShapeError("RRRB expects 1x1 expand, 3x3 body, 1x1 reduce")
    if fea.in_ch != rc or fea.out_ch != rc or reduce.in_ch != rc or reduce.out_ch != c:
        raise ShapeError(
            f"inconsistent RRRB channel chain {c}->{rc}->{fea.in_ch}:{fea.out_ch}->{reduce.in_ch}:{reduce.out_ch}")
    body = fea.kernel.copy()
    body[np.arange(rc), np.arange(rc), 1, 1] += 1  # inner skip
    e = expand.kernel[:, :, 0, 0]
    k1 = np.einsum("mpuv,pi->miuv", body, e)
    b1 = np.einsum("mpuv,p->m", body, expand.bias) + fea.bias
    r = reduce.kernel[:, :, 0, 0]
    k2 = np.einsum("om,miuv->oiuv", r, k1)
    b2 = r @ b1 + reduce.bias
    k2[np.arange(c), np.arange(c), 1, 1] += 1  # outer skip
    return ConvWeights(k2, b2, 1)


_RRRB_ROLES = ("expand", "fea", "inner_add", "reduce", "outer_add")


def _rrrb_nodes(g: Graph, scope: str):
    try:
        ex, fe, ia, rd, oa = (g.node(f"{scope}.{role}") for role in _RRRB_ROLES)
    except KeyError as err:
        raise PatternError(f"incomplete RRRB {scope!r}: {err}") from None
    ok = (
        fe.inputs == [ex.id] and fe.attrs.get("pad_from") == ex.id
        and sorted(ia.inputs) == sorted([fe.id, ex.id])
        and rd.inputs == [ia.id]
        and len(oa.inputs) == 2 and rd.id in oa.inputs
        and ex.inputs[0] in oa.inputs
    )
    if not ok:
        raise PatternError(f"RRRB {scope!r} is not wired as expand/fea/inner_add/reduce/outer_add")
    return ex, fe, rd, oa


def fuse_network(g: Graph) -> Graph:
    """Rewrite a train-form graph into its sequential deploy form.

    Arithmetic is carried out in float64 and cast back to the graph dtype.
    Running a deploy-form graph through this pass returns an equivalent copy.
    """
    out = Graph(g.dtype)
    out.meta = {**g.meta, "form": "deploy"}
    if "config" in out.meta:
        out.meta["config"] = {**out.meta["config"], "form": "deploy"}
    for t in g.inputs:
        out.add_input(t, g.shapes[t])
    remap = {t: t for t in g.inputs}
    consumers = g.consumers()
    pending_bn: dict[str, BnParams] = {}
    skip: set[str] = set()

    def p64(node_id):
        return g.params[node_id].astype(np.float64)

    for node in g.nodes:
        if node.id in skip:
            continue
        a = dict(node.attrs)
        if a.get("block") == "rrrb" and a.get("role") != "fused":
            if a.get("role") != "expand":
                raise PatternError(f"RRRB node {node.id!r} reached before its expand conv")
            scope = a["scope"]
            ex, fe, rd, oa = _rrrb_nodes(g, scope)
            fused = fuse_rrrb(p64(ex.id), p64(fe.id), p64(rd.id)).astype(g.dtype)
            out.add_node("conv", remap[ex.inputs[0]], name=scope, params=fused,
                         block="rrrb", scope=scope, role="fused")
            skip.update(f"{scope}.{r}" for r in _RRRB_ROLES)
            remap[oa.id] = scope
            continue
        if node.kind == "bn":
            users = consumers[node.id]
            if len(users) != 1 or g.node(users[0]).kind != "conv" \
                    or g.node(users[0]).attrs.get("pad_from") != node.id:
                raise PatternError(f"BN {node.id!r} must feed exactly one conv that pads from it")
            pending_bn[users[0]] = g.params[node.id].astype(np.float64)
            remap[node.id] = remap[node.inputs[0]]
            continue
        params = g.params.get(node.id)
        if node.kind == "conv":
            src = a.pop("pad_from", None)
            if node.id in pending_bn:
                params = fold_bn_into_following_conv(pending_bn.pop(node.id), p64(node.id)).astype(g.dtype)
            elif src is not None:
                raise PatternError(f"conv {node.id!r} pads from {src!r}, which is not a foldable BN")
            elif params is not None:
                params = params.astype(g.dtype)
        out.add_node(node.kind, [remap[t] for t in node.inputs], name=node.id, params=params, **a)
        remap[node.id] = node.id
    for t in g.outputs:
        out.mark_output(remap[t])
    return out


@dataclass
class EquivalenceReport:
    max_abs: float
    max_rel: float
    tol: float
    n_trials: int

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tol

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}: max_abs={self.max_abs:.3e} max_rel={self.max_rel:.3e} (tol {self.tol:g}, {self.n_trials} trials)"


def check_equivalence(g1: Graph, g2: Graph, n_trials: int = 10, tol: float = 1e-5, seed: int = 0,
                      input_shape=None) -> EquivalenceReport:
    """Run both graphs on the same seeded uniform [0, 1) inputs and report the worst deviation."""
    if len(g1.inputs) != 1 or len(g2.inputs) != 1 or len(g1.outputs) != 1 or len(g2.outputs) != 1:
        raise ShapeError("check_equivalence supports single-input, single-output graphs")
    s1, s2 = g1.shapes[g1.inputs[0]], g2.shapes[g2.inputs[0]]
    if s1[1] != s2[1]:
        raise ShapeError(f"input signatures differ: {s1} vs {s2}")
    shape = tuple(input_shape or s1)
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    for _ in range(n_trials):
        x = rng.random(shape)
        y1 = forward(g1, x)
        y2 = forward(g2, x)
        if y1.shape != y2.shape:
            raise ShapeError(f"output signatures differ: {y1.shape} vs {y2.shape}")
        diff = np.abs(y1.astype(np.float64) - y2.astype(np.float64))
        max_abs = max(max_abs, float(diff.max()))
        denom = np.maximum(np.abs(y1.astype(np.float64)), 1e-12)
        max_rel = max(max_rel, float((diff / denom).max()))
    return EquivalenceReport(max_abs, max_rel, tol, n_trials)
