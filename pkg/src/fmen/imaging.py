"""Image I/O, BT.601 luminance, MATLAB-convention bicubic resampling, PSNR and SSIM.

Images are ``numpy`` arrays of shape (h, w, channels) with channels 1 or 3;
8-bit images use ``uint8``. Resampling returns floats so callers choose when
to round back to 8 bits.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import correlate2d

from .errors import ImageFormatError, ShapeError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as (h, w, 3) RGB or (h, w, 1) gray ``uint8``; alpha is dropped."""
    path = Path(path)
    head = path.read_bytes()[:33]
    if len(head) < 33 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: not a PNG file")
    if head[24] == 16:
        raise ImageFormatError(f"{path}: 16-bit PNGs are not supported")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "LA", "1"):
                return np.asarray(im.convert("L"), np.uint8)[:, :, None]
            return np.asarray(im.convert("RGB"), np.uint8)
    except OSError as err:
        raise ImageFormatError(f"{path}: corrupt PNG ({err})") from None


def save_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError("save_png expects uint8 samples")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        Image.fromarray(img, "L").save(path, format="PNG")
    elif img.ndim == 3 and img.shape[2] == 3:
        Image.fromarray(img, "RGB").save(path, format="PNG")
    else:
        raise ImageFormatError(f"cannot save image of shape {img.shape}")


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def rgb_to_y(img: np.ndarray, round_y: bool = False) -> np.ndarray:
    """Studio-swing BT.601 luma in [16, 235] from RGB samples in [0, 255]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb_to_y expects an (h, w, 3) image, got {img.shape}")
    rgb = img.astype(np.float64)
    y = 16.0 + (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0
    return np.round(y) if round_y else y


def _luma(img, round_y):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        return rgb_to_y(img, round_y)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0].astype(np.float64)
    return img.astype(np.float64)


# bicubic -------------------------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = ((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
    far = (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2))
    return near + far


def resize_matrix(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) resampling operator with symmetric edge handling."""
    scale = out_len / in_len
    width = 4.0
    shrink = antialias and scale < 1
    if shrink:
        width /= scale
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    wts = scale * cubic(dist * scale) if shrink else cubic(dist)
    wts /= wts.sum(axis=1, keepdims=True)
    # 1-based indices reflected as [1..n, n..1]
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.ravel()), wts.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """MATLAB ``imresize``-style bicubic resize of an (h, w[, c]) array; returns float64.

    The dimension with the stronger reduction is processed first, as MATLAB does.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError("target dimensions must be positive")
    arr = np.asarray(img, np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    passes = [(0, out_h / h, out_h), (1, out_w / w, out_w)]
    passes.sort(key=lambda p: p[1])
    for axis, _, n_out in passes:
        if arr.shape[axis] == n_out:
            continue
        m = resize_matrix(arr.shape[axis], n_out, antialias)
        arr = np.tensordot(m, arr, axes=([1], [axis]))
        if axis == 1:
            arr = arr.transpose(1, 0, 2)
    return arr[:, :, 0] if squeeze else arr


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(arr), 0, 255).astype(np.uint8)


def bicubic_upscale_baseline(hr: np.ndarray, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(sr, hr_cropped)``: HR is mod-cropped, downscaled with antialiasing, and upscaled back."""
    hr = modcrop(hr, scale)
    h, w = hr.shape[:2]
    lr = to_uint8(bicubic_resize(hr, h // scale, w // scale, antialias=True))
    sr = to_uint8(bicubic_resize(lr, h, w, antialias=False))
    return sr, hr


# metrics -------------------------------------------------------------------


def _shaved(a, b, shave):
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if shave:
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    return a, b


def psnr_y(sr: np.ndarray, hr: np.ndarray, shave: int = 0, round_y: bool = False) -> float:
    """PSNR on the luma channel with ``shave`` border pixels removed; ``inf`` when identical."""
    a, b = _shaved(_luma(sr, round_y), _luma(hr, round_y), shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10 * np.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Single-scale SSIM of two 2-D float maps over valid 11x11 Gaussian windows."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    win = gaussian_window()

    def filt(z):
        return correlate2d(z, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    m = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(m.mean())


def ssim_y(sr: np.ndarray, hr: np.ndarray, shave: int = 0, round_y: bool = False) -> float:
    a, b = _shaved(_luma(sr, round_y), _luma(hr, round_y), shave)
    return ssim(a, b)
