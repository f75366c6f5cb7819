"""Desk-scale training: reverse-mode gradients over the graph, L1 loss, Adam.

The schedule mirrors the full recipe (L1 loss, Adam with betas 0.9/0.999,
eps 1e-8, initial rate 5e-4 halved at fixed intervals, flip/rotate
augmentation) with iteration counts and batch size shrunk to CPU scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FmenError, ShapeError
from .graph import ExecutionRecord, Graph, pad_vector, run
from .tensor import BnParams, ConvWeights


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    halve_every: int = 500
    total_iters: int = 2000
    batch: int = 4
    patch: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    augment: bool = True
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigError("betas must lie in (0, 1)")
        if self.halve_every < 1 or self.total_iters < 0 or self.batch < 1 or self.patch < 1:
            raise ConfigError("iteration counts, batch and patch must be positive")
        self.betas = tuple(self.betas)


def lr_at(it: int, cfg: TrainConfig) -> float:
    if it < 0:
        raise ConfigError("iteration must be >= 0")
    return cfg.lr0 * 0.5 ** (it // cfg.halve_every)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (zero where pred == target)."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.abs(d).mean()), np.sign(d) / d.size


# parameters as flat dicts ---------------------------------------------------

_CONV_FIELDS = ("kernel", "bias")
_BN_FIELDS = ("gamma", "beta")


def learnable(g: Graph) -> dict[str, np.ndarray]:
    """Learnable arrays keyed ``"<node>/<field>"`` (BN running stats excluded)."""
    out = {}
    for n in g.nodes:
        p = g.params.get(n.id)
        if isinstance(p, ConvWeights):
            out[f"{n.id}/kernel"], out[f"{n.id}/bias"] = p.kernel, p.bias
        elif isinstance(p, BnParams):
            out[f"{n.id}/gamma"], out[f"{n.id}/beta"] = p.gamma, p.beta
    return out


def assign_learnable(g: Graph, values: dict[str, np.ndarray]) -> None:
    for key, arr in values.items():
        node_id, name = key.rsplit("/", 1)
        p = g.params[node_id]
        if getattr(p, name).shape != arr.shape:
            raise ShapeError(f"{key}: shape {arr.shape} != {getattr(p, name).shape}")
        setattr(p, name, arr)


# backward -------------------------------------------------------------------


def _col2im(dcols: np.ndarray, xshape: tuple, k: int) -> np.ndarray:
    n, c, hp, wp = xshape
    h, w = hp - k + 1, wp - k + 1
    d = dcols.reshape(c, k, k, n, h, w)
    dx = np.zeros(xshape, dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            dx[:, :, u:u + h, v:v + w] += d[:, u, v].transpose(1, 0, 2, 3)
    return dx


def conv2d_backward(x, w: ConvWeights, gy, pad_value=None):
    """Gradients of conv2d w.r.t. input, kernel, bias and the border value."""
    xp = T.pad_input(x, w.padding, pad_value)
    cols = T.im2col(xp, w.k)
    gmat = gy.transpose(1, 0, 2, 3).reshape(w.out_ch, -1)
    dk = (gmat @ cols.T).reshape(w.kernel.shape)
    db = gmat.sum(axis=1)
    dxp = _col2im(w.kernel.reshape(w.out_ch, -1).T @ gmat, xp.shape, w.k)
    p = w.padding
    if p:
        dx = dxp[:, :, p:-p, p:-p]
        dpad = dxp.sum(axis=(0, 2, 3)) - dx.sum(axis=(0, 2, 3))
    else:
        dx, dpad = dxp, np.zeros(x.shape[1], dxp.dtype)
    return np.ascontiguousarray(dx), dk, db, dpad


def backward(g: Graph, rec: ExecutionRecord, output_grads: dict[str, np.ndarray],
             training: bool = True):
    """Reverse-mode sweep over a forward ``rec`` recorded with ``keep=True``.

    Returns ``(param_grads, input_grads)``; ``param_grads`` uses the same keys
    as :func:`learnable`.
    """
    vals = rec.values
    grads: dict[str, np.ndarray] = {}
    pad_grads: dict[str, np.ndarray] = {}
    pgrads: dict[str, np.ndarray] = {}

    def acc(store, key, val):
        store[key] = store[key] + val if key in store else val

    for t, gr in output_grads.items():
        acc(grads, t, gr)
    for node in reversed(g.nodes):
        gy = grads.pop(node.id, None)
        gpad = pad_grads.pop(node.id, None)
        if gy is None and gpad is None:
            continue
        missing = [t for t in node.inputs if t not in vals]
        if missing or node.id not in vals:
            raise FmenError(f"backward: intermediates for {node.id!r} were not retained")
        xs = [vals[t] for t in node.inputs]
        x = xs[0]
        k = node.kind
        if k == "conv":
            p = g.params[node.id]
            if gpad is not None:
                acc(pgrads, f"{node.id}/bias", gpad)
            if gy is None:
                continue
            dx, dk, db, dpad = conv2d_backward(x, p, gy, pad_vector(g, node, rec))
            acc(grads, node.inputs[0], dx)
            acc(pgrads, f"{node.id}/kernel", dk)
            acc(pgrads, f"{node.id}/bias", db)
            src = node.attrs.get("pad_from")
            if src is not None:
                acc(pad_grads, src, dpad)
        elif k == "bn":
            _bn_backward(g, node, rec, x, gy, gpad, training, grads, pgrads, acc)
        elif k == "leaky_relu":
            slope = node.attrs.get("slope", T.DEFAULT_SLOPE)
            acc(grads, node.inputs[0], gy * np.where(x >= 0, 1.0, slope).astype(gy.dtype))
        elif k == "sigmoid":
            y = vals[node.id]
            acc(grads, node.inputs[0], gy * y * (1 - y))
        elif k == "add":
            acc(grads, node.inputs[0], gy)
            acc(grads, node.inputs[1], gy)
        elif k == "mul":
            acc(grads, node.inputs[0], gy * xs[1])
            acc(grads, node.inputs[1], gy * xs[0])
        elif k == "concat":
            start = 0
            for t, xi in zip(node.inputs, xs):
                acc(grads, t, gy[:, start:start + xi.shape[1]])
                start += xi.shape[1]
        elif k == "pixel_shuffle":
            acc(grads, node.inputs[0], T.pixel_unshuffle(gy, node.attrs["scale"]))
        else:
            raise FmenError(f"no gradient rule for {k!r}")
    return pgrads, {t: grads.get(t) for t in g.inputs}


def _bn_backward(g, node, rec, x, gy, gpad, training, grads, pgrads, acc):
    p: BnParams = g.params[node.id]
    bshape = (1, -1, 1, 1)
    if training:
        st = rec.bn_stats[node.id]
        inv = st.inv_std(p.eps)
        n = x.size // x.shape[1]
        dx = np.zeros_like(x)
        if gy is not None:
            acc(pgrads, f"{node.id}/gamma", (gy * st.xhat).sum(axis=(0, 2, 3)))
            acc(pgrads, f"{node.id}/beta", gy.sum(axis=(0, 2, 3)))
            dxhat = gy * p.gamma.reshape(bshape)
            dx += inv.reshape(bshape) / n * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - st.xhat * (dxhat * st.xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        if gpad is not None:
            # border value beta - gamma * mean * inv depends on the batch statistics
            acc(pgrads, f"{node.id}/beta", gpad)
            acc(pgrads, f"{node.id}/gamma", -gpad * st.mean * inv)
            d_mean = -gpad * p.gamma * inv
            d_var = gpad * p.gamma * st.mean * inv ** 3 / 2
            dx += (d_mean / n).reshape(bshape) + (2 * d_var / n).reshape(bshape) * (x - st.mean.reshape(bshape))
        acc(grads, node.inputs[0], dx.astype(x.dtype, copy=False))
        return
    inv = 1.0 / np.sqrt(p.running_var + p.eps)
    if gy is not None:
        acc(pgrads, f"{node.id}/gamma", (gy * (x - p.running_mean.reshape(bshape))).sum(axis=(0, 2, 3)) * inv)
        acc(pgrads, f"{node.id}/beta", gy.sum(axis=(0, 2, 3)))
        acc(grads, node.inputs[0], gy * (p.gamma * inv).reshape(bshape))
    if gpad is not None:
        acc(pgrads, f"{node.id}/beta", gpad)
        acc(pgrads, f"{node.id}/gamma", -gpad * p.running_mean * inv)


# optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; parameters without a gradient are left alone."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    new = dict(params)
    for key, gr in grads.items():
        if key not in params:
            raise ShapeError(f"gradient for unknown parameter {key!r}")
        p = params[key]
        if gr.shape != p.shape:
            raise ShapeError(f"{key}: gradient shape {gr.shape} != parameter shape {p.shape}")
        m = state.m.get(key, np.zeros_like(p, dtype=np.float64))
        v = state.v.get(key, np.zeros_like(p, dtype=np.float64))
        m = b1 * m + (1 - b1) * gr
        v = b2 * v + (1 - b2) * gr * gr
        state.m[key], state.v[key] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new[key] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return new, state


# data ---------------------------------------------------------------------------


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flip/rotation transforms of an (..., h, w) array."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def to_chw(img: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 -> (3, h, w) float64 in [0, 1]."""
    return np.asarray(img, np.float64).transpose(2, 0, 1) / 255.0


def make_pair(hr: np.ndarray, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Mod-crop an (h, w, 3) uint8 HR image and derive its bicubic LR partner (both CHW floats)."""
    from .imaging import bicubic_resize, modcrop

    hr = modcrop(hr, scale)
    if scale == 1:
        lr = hr
    else:
        lr = bicubic_resize(hr, hr.shape[0] // scale, hr.shape[1] // scale, antialias=True)
        lr = np.clip(np.round(lr), 0, 255).astype(np.uint8)
    return to_chw(lr), to_chw(hr)


def sample_batch(hr_images, scale: int, cfg: TrainConfig, rng: np.random.Generator, pairs=None):
    """Aligned random LR/HR crops, each with one random dihedral transform.

    ``pairs`` may carry precomputed :func:`make_pair` results to skip the
    bicubic downscale on every call.
    """
    if pairs is None:
        pairs = [make_pair(im, scale) for im in hr_images]
    p = cfg.patch
    lrs, hrs = [], []
    for _ in range(cfg.batch):
        lr, hr = pairs[rng.integers(len(pairs))]
        h, w = lr.shape[1:]
        if h < p or w < p:
            raise ShapeError(f"image with LR size {h}x{w} is smaller than the {p}px patch")
        y, x = rng.integers(h - p + 1), rng.integers(w - p + 1)
        lp = lr[:, y:y + p, x:x + p]
        hp = hr[:, y * scale:(y + p) * scale, x * scale:(x + p) * scale]
        if cfg.augment:
            k = int(rng.integers(8))
            lp, hp = dihedral(lp, k), dihedral(hp, k)
        lrs.append(lp)
        hrs.append(hp)
    return np.stack(lrs), np.stack(hrs)


# loop ---------------------------------------------------------------------------


def train_step(g: Graph, lr_batch, hr_batch, state: AdamState, lr: float, cfg: TrainConfig) -> float:
    """Forward, L1 loss, backward, Adam update, running-stat update; mutates ``g``."""
    rec = run(g, {g.inputs[0]: lr_batch}, training=True, momentum=cfg.bn_momentum, keep=True)
    out = rec.values[g.outputs[0]]
    loss, gout = l1_loss(out, hr_batch.astype(out.dtype))
    pgrads, _ = backward(g, rec, {g.outputs[0]: gout.astype(out.dtype)}, training=True)
    new, _ = adam_step(learnable(g), pgrads, state, lr, cfg.betas, cfg.eps_adam)
    assign_learnable(g, new)
    for node_id, bn in rec.bn_updates.items():
        cur = g.params[node_id]
        cur.running_mean, cur.running_var = bn.running_mean, bn.running_var
    return loss


def train(g: Graph, cfg: TrainConfig, batches=None, hr_images=None, scale: int | None = None,
          callback=None) -> tuple[Graph, list[float]]:
    """Train a copy of ``g``; returns it with the loss trajectory.

    Either pass a fixed ``batches`` tuple ``(lr, hr)`` reused every step, or
    ``hr_images`` plus ``scale`` for random crops.
    """
    g = g.copy()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    pairs = None
    if batches is None:
        if hr_images is None or scale is None:
            raise ConfigError("train needs either fixed batches or hr_images and scale")
        pairs = [make_pair(im, scale) for im in hr_images]
    losses = []
    for it in range(cfg.total_iters):
        if batches is not None:
            lr_b, hr_b = batches
        else:
            lr_b, hr_b = sample_batch(None, scale, cfg, rng, pairs=pairs)
        loss = train_step(g, lr_b, hr_b, state, lr_at(it, cfg), cfg)
        losses.append(loss)
        if callback is not None:
            callback(it, loss)
    return g, losses
