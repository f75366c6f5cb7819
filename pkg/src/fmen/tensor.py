"""Dense NCHW tensors and the numeric kernels the engine is built from.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width), C-contiguous with width fastest.
Every kernel here is a pure function unless an ``out`` buffer is passed,
which is how the executor realises in-place activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

DEFAULT_DTYPE = np.float32
DEFAULT_SLOPE = 0.05


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as an NCHW tensor and return it as a contiguous array."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor dims must be >= 1, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


@dataclass
class ConvWeights:
    """Kernel of shape (out_ch, in_ch, k, k) plus a per-output-channel bias."""

    kernel: np.ndarray
    bias: np.ndarray
    padding: int | None = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"conv kernel must be (out, in, k, k), got {self.kernel.shape}")
        if self.k % 2 == 0:
            raise ConfigError(f"only odd kernel sizes are supported, got k={self.k}")
        if self.bias.shape != (self.out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch={self.out_ch}")
        if self.padding is None:
            self.padding = self.k // 2
        if self.padding < 0:
            raise ConfigError("padding must be >= 0")

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    def astype(self, dtype) -> "ConvWeights":
        return ConvWeights(self.kernel.astype(dtype), self.bias.astype(dtype), self.padding)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        self.running_mean = np.asarray(self.running_mean)
        self.running_var = np.asarray(self.running_var)
        n = self.gamma.shape
        if len(n) != 1 or any(v.shape != n for v in (self.beta, self.running_mean, self.running_var)):
            raise ShapeError("BN vectors must be 1-D and of equal length")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be non-negative")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=DEFAULT_DTYPE, eps: float = 1e-5) -> "BnParams":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (a, c) such that BN(x) = a * x + c in inference mode."""
        a = self.gamma / np.sqrt(self.running_var + self.eps)
        return a, self.beta - a * self.running_mean

    def astype(self, dtype) -> "BnParams":
        return BnParams(
            self.gamma.astype(dtype), self.beta.astype(dtype),
            self.running_mean.astype(dtype), self.running_var.astype(dtype), self.eps,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "gamma": self.gamma, "beta": self.beta,
            "running_mean": self.running_mean, "running_var": self.running_var,
        }


def pad_input(x: np.ndarray, padding: int, pad_value=None) -> np.ndarray:
    """Constant-pad the spatial dims; ``pad_value`` is a scalar or per-channel vector."""
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    if pad_value is None:
        out[...] = 0
    else:
        pv = np.asarray(pad_value, dtype=x.dtype)
        if pv.ndim == 0:
            out[...] = pv
        else:
            if pv.shape != (c,):
                raise ShapeError(f"pad_value length {pv.shape} does not match channels {c}")
            out[...] = pv[None, :, None, None]
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (c*k*k, n*h*w) patch matrix, h = H-k+1."""
    n, c = xp.shape[:2]
    if k == 1:
        return xp.transpose(1, 0, 2, 3).reshape(c, -1)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    h, w = win.shape[2:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def conv2d(x: np.ndarray, w: ConvWeights, pad_value=None) -> np.ndarray:
    """Stride-1 cross-correlation with constant border ``pad_value`` (zero by default)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got {x.shape}")
    if x.shape[1] != w.in_ch:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.in_ch}")
    n = x.shape[0]
    xp = pad_input(x, w.padding, pad_value)
    h, ww = xp.shape[2] - w.k + 1, xp.shape[3] - w.k + 1
    if h < 1 or ww < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    cols = im2col(xp, w.k)
    kmat = w.kernel.reshape(w.out_ch, -1).astype(x.dtype, copy=False)
    out = kmat @ cols
    out += w.bias.astype(x.dtype, copy=False)[:, None]
    return np.ascontiguousarray(out.reshape(w.out_ch, n, h, ww).transpose(1, 0, 2, 3))


def leaky_relu(x: np.ndarray, slope: float = DEFAULT_SLOPE, out: np.ndarray | None = None) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope)) if out is None else _leaky_inplace(x, slope, out)


def _leaky_inplace(x, slope, out):
    np.multiply(x, x.dtype.type(slope), out=out, where=x < 0)
    if out is not x:
        np.copyto(out, x, where=x >= 0)
    return out


def sigmoid(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    half = x.dtype.type(0.5)
    res = np.multiply(x, half, out=out)
    np.tanh(res, out=res)
    res *= half
    res += half
    return res


def batch_norm_infer(x: np.ndarray, p: BnParams) -> np.ndarray:
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch_norm: input has {x.shape[1]} channels, params have {p.channels}")
    a, c = p.scale_shift()
    return x * a.astype(x.dtype)[None, :, None, None] + c.astype(x.dtype)[None, :, None, None]


@dataclass
class BnBatchStats:
    """Batch statistics kept from a training-mode forward for the backward pass."""

    mean: np.ndarray
    var: np.ndarray
    xhat: np.ndarray = field(repr=False)

    def inv_std(self, eps: float) -> np.ndarray:
        return 1.0 / np.sqrt(self.var + eps)


def batch_norm_train(x: np.ndarray, p: BnParams, momentum: float = 0.1, return_stats: bool = False):
    """Normalise with batch statistics over (n, h, w) and update the running averages.

    Returns ``(y, updated_params)`` or ``(y, updated_params, stats)``.
    """
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch_norm: input has {x.shape[1]} channels, params have {p.channels}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ShapeError("batch_norm_train needs at least two values per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    xhat = (x - mean[None, :, None, None]) / np.sqrt(var + p.eps)[None, :, None, None]
    y = xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    unbiased = var * count / (count - 1)
    new = replace(
        p,
        running_mean=((1 - momentum) * p.running_mean + momentum * mean).astype(p.running_mean.dtype),
        running_var=((1 - momentum) * p.running_var + momentum * unbiased).astype(p.running_var.dtype),
    )
    y = y.astype(x.dtype, copy=False)
    if return_stats:
        return y, new, BnBatchStats(mean, var, xhat)
    return y, new


def elementwise(x: np.ndarray, y: np.ndarray, kind: str, out: np.ndarray | None = None) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"elementwise {kind}: shape mismatch {x.shape} vs {y.shape}")
    if kind == "add":
        return np.add(x, y, out=out)
    if kind == "mul":
        return np.multiply(x, y, out=out)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


def pixel_shuffle(x: np.ndarray, scale: int) -> np.ndarray:
    n, c, h, w = x.shape
    if c % (scale * scale):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by scale^2={scale * scale}")
    oc = c // (scale * scale)
    y = x.reshape(n, oc, scale, scale, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, oc, h * scale, w * scale))


def pixel_unshuffle(x: np.ndarray, scale: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle` (space-to-depth)."""
    n, c, h, w = x.shape
    if h % scale or w % scale:
        raise ShapeError(f"pixel_unshuffle: spatial size {h}x{w} not divisible by {scale}")
    y = x.reshape(n, c, h // scale, scale, w // scale, scale).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * scale * scale, h // scale, w // scale))
