"""Builders for RRRB, ERB, HFAB and the full FMEN network.

Every builder exists in two forms. The *train* form carries the multi-branch
structure used during optimisation; the *deploy* form is the sequential
network produced by :func:`fmen.reparam.fuse_network`. Nodes are tagged with
``block``/``scope``/``role`` attributes so the fusion pass can find its
patterns without generic subgraph matching.

Wiring choices that the architecture description leaves open:

* RRRB: ``y = reduce(conv3(e) + e) + x`` with ``e = expand(x)``. The inner
  3x3 pads ``e`` with the expand bias, which is the value ``expand`` takes on
  a zero-padded input; this makes the fused 3x3 exact at image borders.
* HFAB: a BN sits immediately before each channel-changing 3x3 conv, and
  that conv pads with the BN's response to zero for the same reason.
* The global residual starts at the head conv output.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import Graph
from .tensor import DEFAULT_DTYPE, BnParams, ConvWeights

FORMS = ("train", "deploy")


@dataclass
class FmenConfig:
    scale: int = 4
    trunk_channels: int = 64
    hfab_channels: int = 32
    n_pairs: int = 5
    rrrb_expansion: int = 2
    leaky_slope: float = 0.05
    form: str = "train"

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        for name in ("trunk_channels", "hfab_channels", "n_pairs", "rrrb_expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hfab_channels > self.trunk_channels:
            raise ConfigError("hfab_channels must not exceed trunk_channels")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        if self.form not in FORMS:
            raise ConfigError(f"form must be one of {FORMS}")

    @classmethod
    def small(cls, scale: int = 4, **kw) -> "FmenConfig":
        """The reduced-width variant: 50 channels everywhere outside HFAB."""
        return cls(scale=scale, trunk_channels=50, **kw)

    def with_form(self, form: str) -> "FmenConfig":
        return FmenConfig(**{**asdict(self), "form": form})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FmenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "FmenConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            d = tomllib.loads(text)
            d = d.get("fmen", d)
        else:
            d = json.loads(text)
        return cls.from_dict(d)


def _zero_conv(cin, cout, k, dtype):
    return ConvWeights(np.zeros((cout, cin, k, k), dtype), np.zeros(cout, dtype))


def _conv(g, x, cin, cout, k, name, **attrs):
    return g.add_node("conv", x, name=name, params=_zero_conv(cin, cout, k, g.dtype), **attrs)


def add_rrrb(g: Graph, x: str, c: int, r: int, form: str, scope: str) -> str:
    tag = {"block": "rrrb", "scope": scope}
    if form == "deploy":
        return _conv(g, x, c, c, 3, scope, role="fused", **tag)
    e = _conv(g, x, c, r * c, 1, f"{scope}.expand", role="expand", **tag)
    f = _conv(g, e, r * c, r * c, 3, f"{scope}.fea", role="fea", pad_from=e, **tag)
    s = g.add_node("add", [f, e], name=f"{scope}.inner_add", role="inner_add", **tag)
    red = _conv(g, s, r * c, c, 1, f"{scope}.reduce", role="reduce", **tag)
    return g.add_node("add", [red, x], name=f"{scope}.outer_add", role="outer_add", **tag)


def add_erb(g: Graph, x: str, c: int, r: int, slope: float, form: str, scope: str) -> str:
    y = add_rrrb(g, x, c, r, form, f"{scope}.rrrb0")
    y = g.add_node("leaky_relu", y, name=f"{scope}.act", slope=slope, block="erb", scope=scope)
    return add_rrrb(g, y, c, r, form, f"{scope}.rrrb1")


def add_hfab(g: Graph, x: str, c: int, inner: int, r: int, slope: float, form: str, scope: str) -> str:
    if inner > c:
        raise ConfigError("HFAB inner width must not exceed its input width")
    tag = {"block": "hfab", "scope": scope}
    y = x
    if form == "train":
        y = g.add_node("bn", y, name=f"{scope}.bn0", params=BnParams.identity(c, g.dtype), **tag)
    y = _conv(g, y, c, inner, 3, f"{scope}.squeeze", role="squeeze",
              pad_from=y if form == "train" else None, **tag)
    y = g.add_node("leaky_relu", y, name=f"{scope}.act", slope=slope, **tag)
    y = add_erb(g, y, inner, r, slope, form, f"{scope}.erb")
    if form == "train":
        y = g.add_node("bn", y, name=f"{scope}.bn1", params=BnParams.identity(inner, g.dtype), **tag)
    y = _conv(g, y, inner, c, 3, f"{scope}.excite", role="excite",
              pad_from=y if form == "train" else None, **tag)
    a = g.add_node("sigmoid", y, name=f"{scope}.gate", **tag)
    return g.add_node("mul", [x, a], name=f"{scope}.mul", **tag)


def _block_graph(c, hw, dtype, name="x"):
    g = Graph(dtype)
    g.add_input(name, (1, c, *hw))
    return g


def build_rrrb(c: int, r: int = 2, form: str = "train", hw=(16, 16), dtype=DEFAULT_DTYPE) -> Graph:
    g = _block_graph(c, hw, dtype)
    g.mark_output(add_rrrb(g, "x", c, r, form, "rrrb"))
    g.meta["form"] = form
    return g


def build_erb(c: int, r: int = 2, slope: float = 0.05, form: str = "train", hw=(16, 16),
              dtype=DEFAULT_DTYPE) -> Graph:
    g = _block_graph(c, hw, dtype)
    g.mark_output(add_erb(g, "x", c, r, slope, form, "erb"))
    g.meta["form"] = form
    return g


def build_hfab(c: int, inner: int, r: int = 2, slope: float = 0.05, form: str = "train", hw=(16, 16),
               dtype=DEFAULT_DTYPE) -> Graph:
    g = _block_graph(c, hw, dtype)
    g.mark_output(add_hfab(g, "x", c, inner, r, slope, form, "hfab"))
    g.meta["form"] = form
    return g


def build_fmen(cfg: FmenConfig, lr_hw=(64, 64), dtype=DEFAULT_DTYPE) -> Graph:
    """Head conv, ``n_pairs`` x (ERB, HFAB), global residual, conv + pixel shuffle."""
    c, s = cfg.trunk_channels, cfg.scale
    g = Graph(dtype)
    g.meta = {"config": cfg.to_dict(), "form": cfg.form}
    x = g.add_input("lr", (1, 3, *lr_hw))
    head = _conv(g, x, 3, c, 3, "head", block="head")
    y = head
    for i in range(cfg.n_pairs):
        y = add_erb(g, y, c, cfg.rrrb_expansion, cfg.leaky_slope, cfg.form, f"pair{i}.erb")
        y = add_hfab(g, y, c, cfg.hfab_channels, cfg.rrrb_expansion, cfg.leaky_slope, cfg.form,
                     f"pair{i}.hfab")
    y = g.add_node("add", [y, head], name="global_add", block="tail")
    y = _conv(g, y, c, 3 * s * s, 3, "recon", block="tail")
    g.mark_output(g.add_node("pixel_shuffle", y, name="sr", scale=s, block="tail"))
    return g


def he_init(g: Graph, seed: int = 0) -> Graph:
    """Return a copy of ``g`` with He-normal kernels, zero biases and identity BN."""
    out = g.copy()
    rng = np.random.default_rng(seed)
    for node in out.nodes:
        p = out.params.get(node.id)
        if node.kind == "conv":
            if p is None:
                raise ConfigError(f"conv {node.id!r} has no parameters to initialise")
            fan_in = p.in_ch * p.k * p.k
            kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), p.kernel.shape).astype(out.dtype)
            out.params[node.id] = ConvWeights(kernel, np.zeros(p.out_ch, out.dtype), p.padding)
        elif node.kind == "bn":
            if p is None:
                raise ConfigError(f"bn {node.id!r} has no parameters to initialise")
            out.params[node.id] = BnParams.identity(p.channels, out.dtype, p.eps)
    return out


def topology_signature(g: Graph) -> list[tuple]:
    """Node-by-node structural fingerprint used for isomorphism checks."""
    sig = []
    for n in g.nodes:
        attrs = {k: v for k, v in n.attrs.items() if k not in ("pad_from", "role", "block", "scope")}
        sig.append((n.id, n.kind, tuple(n.inputs), tuple(sorted(attrs.items()))))
    return sig
