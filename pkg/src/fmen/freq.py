"""Radial power-spectral-density analysis of averaged feature maps.

Pipeline: average the tapped tensor over channels, take the centred power
spectrum, accumulate it over integer-radius rings, and normalise to sum 1.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import FmenError, ShapeError
from .graph import Graph, run


@dataclass
class SpectralDensity:
    bins: np.ndarray
    normalized: bool

    @property
    def radius(self) -> np.ndarray:
        return np.arange(len(self.bins))

    def low_band_mass(self, fraction: float = 0.1) -> float:
        """Share of the total held by the lowest ``fraction`` of radii (at least one bin)."""
        n = max(1, int(round(fraction * len(self.bins))))
        total = self.bins.sum()
        return float(self.bins[:n].sum() / total) if total > 0 else 0.0


def average_feature_map(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected an (n, c, h, w) tensor, got {x.shape}")
    if x.shape[0] != 1:
        raise ShapeError("average_feature_map needs a batch of one")
    return x[0].astype(np.float64).mean(axis=0)


def centered_power_spectrum(m: np.ndarray) -> np.ndarray:
    """``|DFT2(m)|^2`` with the zero frequency moved to index (h // 2, w // 2)."""
    m = np.asarray(m, np.float64)
    if m.ndim != 2 or min(m.shape) < 2:
        raise ShapeError(f"expected a 2-D map of at least 2x2, got {m.shape}")
    spec = np.fft.fftshift(np.fft.fft2(m))
    return spec.real ** 2 + spec.imag ** 2


def radial_density(power: np.ndarray, normalize: bool = True) -> SpectralDensity:
    """Sum ``power`` over rings of equal rounded distance from the centre.

    Radii run 0..R with R = min(h, w) // 2; corner pixels beyond R land in bin R.
    """
    h, w = power.shape
    cy, cx = h // 2, w // 2
    yy, xx = np.indices(power.shape)
    r = np.rint(np.hypot(yy - cy, xx - cx)).astype(np.int64)
    rmax = min(h, w) // 2
    np.minimum(r, rmax, out=r)
    bins = np.bincount(r.ravel(), weights=power.ravel(), minlength=rmax + 1)
    if normalize:
        total = bins.sum()
        if total > 0:
            bins = bins / total
    return SpectralDensity(bins, normalize)


def feature_psd(x: np.ndarray, normalize: bool = True) -> SpectralDensity:
    return radial_density(centered_power_spectrum(average_feature_map(x)), normalize)


def psd_probe(g: Graph, image: np.ndarray, taps: list[str], normalize: bool = True) -> dict[str, SpectralDensity]:
    """Run ``g`` once on an NCHW ``image`` and return the density of each tapped tensor."""
    unknown = [t for t in taps if not g.has_tensor(t)]
    if unknown:
        raise FmenError(f"unknown tap tensors: {unknown}")
    rec = run(g, {g.inputs[0]: image}, keep=True)
    return {t: feature_psd(rec.values[t], normalize) for t in taps}


def hfab_taps(g: Graph) -> list[str]:
    """Input and output tensor of every HFAB in network order."""
    taps = []
    for n in g.nodes:
        if n.kind == "mul" and n.attrs.get("block") == "hfab":
            taps.extend([n.inputs[0], n.id])
    return taps


def densities_csv(densities: dict[str, SpectralDensity]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["radius", "density", "tap"])
    for tap, d in densities.items():
        for r, v in enumerate(d.bins):
            wr.writerow([r, repr(float(v)), tap])
    return buf.getvalue()
