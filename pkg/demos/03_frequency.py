"""
What the attention gate does to frequencies
===========================================

Average a feature tensor over channels, take its 2D power spectrum and bin
it by radius. Comparing the block input with the gated output shows how the
spectrum's mass moves. Weights here are random, so treat the numbers as a
pipeline check rather than a finding about trained models.
"""
import numpy as np

from fmen import FmenConfig, build_fmen, he_init
from fmen.freq import hfab_taps, psd_probe

yy, xx = np.mgrid[0:48, 0:48] / 48.0
img = 0.5 + 0.25 * np.sin(20 * xx) * np.cos(3 * yy) + 0.2 * (xx > 0.5)
x = np.broadcast_to(img, (1, 3, 48, 48)).copy()

g = he_init(build_fmen(FmenConfig(scale=2, trunk_channels=16, hfab_channels=8, n_pairs=2), lr_hw=(48, 48)))
taps = hfab_taps(g)
dens = psd_probe(g.astype(np.float64), x, taps)

for tap in taps:
    bins = dens[tap].bins
    low, high = bins[:4].sum(), bins[len(bins) // 2:].sum()
    print(f"{tap:>28}: low-radius mass {low:.3f}  outer-half mass {high:.4f}")
