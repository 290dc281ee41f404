"""Synthetic image distributions for the train/test shift.

``gen_phantom`` gives piecewise-constant ellipse images (the "MRI-like"
domain); ``gen_texture`` gives smooth random fields with step edges and
dense gradients (the "natural" domain).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _check_size(n: int) -> None:
    if n < 32:
        raise ValueError(f"image size must be >= 32, got {n}")


def gen_phantom(n: int, seed: int) -> np.ndarray:
    _check_size(n)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n))
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0.2 * n, 0.8 * n, size=2)
        ay, ax = rng.uniform(0.3 * n, 0.6 * n, size=2)
        phi = rng.uniform(0.0, np.pi)
        c, s = np.cos(phi), np.sin(phi)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        img[inside] = rng.uniform(0.0, 1.0)
    img = ndimage.uniform_filter(img, size=3, mode="nearest")
    return np.clip(img, 0.0, 1.0)


def gen_texture(n: int, seed: int) -> np.ndarray:
    _check_size(n)
    rng = np.random.default_rng(seed)
    # coarse fields only: a prior trained on them smooths harder than phantoms need
    sigma = float(rng.uniform(2.5, 4.0))
    field = ndimage.gaussian_filter(rng.normal(size=(n, n)), sigma, mode="wrap")
    field /= field.std()
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(rng.integers(1, 4)):
        phi = rng.uniform(0.0, 2 * np.pi)
        off = rng.uniform(-0.3 * n, 0.3 * n)
        side = (xx - n / 2) * np.cos(phi) + (yy - n / 2) * np.sin(phi) > off
        field += rng.uniform(-1.0, 1.0) * side
    field -= field.min()
    return field / field.max()


def mean_gradient(img: np.ndarray) -> float:
    gy, gx = np.gradient(img)
    return float(np.mean(np.hypot(gx, gy)))


def make_dataset(kind: str, n: int, count: int, seed: int) -> list[np.ndarray]:
    gen = {"phantom": gen_phantom, "texture": gen_texture}[kind]
    ss = np.random.SeedSequence(seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(count)]
    return [gen(n, s) for s in seeds]
