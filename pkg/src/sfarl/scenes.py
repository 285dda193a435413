"""Procedural piecewise-smooth test scenes.

Seeded generator for clean grayscale images with the ingredients restoration
priors care about: smooth shading, sharp edges, and mild texture. Used for
demo datasets and the scaled-down training experiments.
"""

from __future__ import annotations

import numpy as np

from .degrade import gaussian_kernel
from .grids import conv2_same


def make_scene(h: int, w: int, seed: int) -> np.ndarray:
    """Random scene in [0.03, 0.97]: gradient base + blobs + edges + texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    img = rng.uniform(-0.4, 0.4) * xx + rng.uniform(-0.4, 0.4) * yy

    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, 2)
        sig = rng.uniform(0.08, 0.35)
        amp = rng.uniform(-0.6, 0.6)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))

    for _ in range(rng.integers(2, 4)):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0.25, 0.75)
        side = np.cos(theta) * xx + np.sin(theta) * yy - offset
        img += rng.uniform(-0.5, 0.5) * (side > 0)

    texture = rng.normal(0.0, 1.0, size=(h, w))
    texture = conv2_same(texture, gaussian_kernel(1.0, radius=2), padding="zero")
    img += rng.uniform(0.0, 0.04) * texture

    lo, hi = img.min(), img.max()
    if hi - lo < 1e-9:
        return np.full((h, w), 0.5)
    return 0.03 + 0.94 * (img - lo) / (hi - lo)
