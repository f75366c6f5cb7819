"""
Overfitting four patches, then deploying
========================================

A 16-channel, one-pair FMEN learns to upscale four fixed patches with Adam
and L1 loss. The trained train-form weights are saved, fused and reloaded.
"""
import tempfile
from pathlib import Path

import numpy as np

from fmen import FmenConfig, build_fmen, check_equivalence, fuse_network, he_init
from fmen.train import TrainConfig, train
from fmen.imaging import bicubic_resize
from fmen.weights import read_weights, write_weights

yy, xx = np.mgrid[0:64, 0:64] / 64.0
img = 0.5 + 0.4 * np.stack([np.sin(9 * xx + 4 * yy), np.cos(13 * yy - 3 * xx), np.sin(7 * (xx + yy) ** 2)], -1)
crops = [img[y:y + 16, x:x + 16] for y, x in ((0, 0), (10, 30), (40, 8), (44, 44))]
hr = np.stack([c.transpose(2, 0, 1) for c in crops]).astype(np.float32)
lr = np.stack([bicubic_resize(c, 8, 8).transpose(2, 0, 1) for c in crops]).astype(np.float32)

g = he_init(build_fmen(FmenConfig(scale=2, trunk_channels=16, hfab_channels=8, n_pairs=1), lr_hw=(8, 8)))
g, losses = train(g, TrainConfig(total_iters=400, halve_every=100, augment=False), batches=(lr, hr),
                  callback=lambda i, loss: print(f"step {i:4d}  L1 {loss:.4f}") if i % 100 == 0 else None)
print(f"loss {losses[0]:.3f} -> {losses[-1]:.4f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "toy.fmen"
    write_weights(path, g)
    back = read_weights(path)
    deploy = fuse_network(back)
    print(check_equivalence(back, deploy, n_trials=3, tol=1e-5, input_shape=(1, 3, 32, 32)))
