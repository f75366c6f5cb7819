"""Regenerate the toy-trained FMEN weight fixtures used by the equivalence checks.

Each default-config train-form network (x2, x3, x4) is He-initialised and
trained to nearest-neighbour upscaling of uniform noise: every Adam step
draws four fresh 8x8 LR patches, so the network has to learn the operator
rather than memorise a few patches. That brings its outputs on 64x64 uniform
inputs down to a few units; at He init they reach ~5e4.

    python tests/fixtures/make_toy_models.py [--steps N] [--scales 2 3 4]
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from fmen.blocks import FmenConfig, build_fmen, he_init
from fmen.train import AdamState, TrainConfig, lr_at, train_step
from fmen.weights import write_weights

HERE = Path(__file__).resolve().parent
STEPS = 3000
HALVE_EVERY = 1000
PATCH = 8
BATCH = 4


def fixture_path(scale: int) -> Path:
    return HERE / f"toy_fmen_x{scale}.fmen"


def noise_pairs(scale: int, rng: np.random.Generator, n: int = BATCH, hw: int = PATCH):
    lr = rng.random((n, 3, hw, hw)).astype(np.float32)
    return lr, lr.repeat(scale, 2).repeat(scale, 3)


def make(scale: int, steps: int = STEPS, seed: int = 0, log=None):
    g = he_init(build_fmen(FmenConfig(scale=scale), lr_hw=(PATCH, PATCH)), seed)
    cfg = TrainConfig(total_iters=steps, halve_every=HALVE_EVERY, augment=False, seed=seed)
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses = []
    for it in range(steps):
        lr, hr = noise_pairs(scale, rng)
        losses.append(train_step(g, lr, hr, state, lr_at(it, cfg), cfg))
        if log is not None:
            log(it, losses[-1])
    return g, losses


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=STEPS)
    ap.add_argument("--scales", type=int, nargs="+", default=[2, 3, 4])
    args = ap.parse_args()
    for s in args.scales:
        t0 = time.perf_counter()
        g, losses = make(s, args.steps, log=lambda i, loss: print(f"  x{s} step {i}: {loss:.4g}", flush=True)
                         if i % 500 == 0 else None)
        size = write_weights(fixture_path(s), g)
        print(f"x{s}: loss {losses[0]:.4g} -> {losses[-1]:.4g}, {size} bytes, {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
