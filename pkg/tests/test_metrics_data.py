import math

import numpy as np
import pytest

from pnp_ttt.data import gen_phantom, gen_texture, make_dataset, mean_gradient
from pnp_ttt.metrics import evaluate, psnr, ssim


def ssim_oracle(x, y):
    """Straightforward per-window SSIM with explicit loops."""
    size, sigma = 11, 1.5
    g = [math.exp(-((i - 5) ** 2) / (2 * sigma**2)) for i in range(size)]
    s = sum(g)
    w = [[g[i] * g[j] / (s * s) for j in range(size)] for i in range(size)]
    c1, c2 = 0.01**2, 0.03**2
    h, wd = x.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            mx = my = 0.0
            for a in range(size):
                for b in range(size):
                    mx += w[a][b] * x[i + a, j + b]
                    my += w[a][b] * y[i + a, j + b]
            vx = vy = cxy = 0.0
            for a in range(size):
                for b in range(size):
                    dx = x[i + a, j + b] - mx
                    dy = y[i + a, j + b] - my
                    vx += w[a][b] * dx * dx
                    vy += w[a][b] * dy * dy
                    cxy += w[a][b] * dx * dy
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_psnr_identical_is_infinite(rng):
    x = rng.random((8, 8))
    assert psnr(x, x) == math.inf


@pytest.mark.parametrize("offset,expected", [(0.1, 20.0), (0.5, 6.0206)])
def test_psnr_constant_offset(rng, offset, expected):
    x = rng.random((16, 16))
    assert psnr(x + offset, x) == pytest.approx(expected, abs=1e-4)


def test_psnr_symmetric_and_monotone(rng):
    x = rng.random((32, 32))
    n = rng.normal(size=(32, 32))
    vals = [psnr(x + s * n, x) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert psnr(x + 0.01 * n, x) == psnr(x, x + 0.01 * n)


def test_psnr_errors(rng):
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), peak=0.0)


def test_ssim_identical_is_one(rng):
    x = rng.random((32, 32))
    assert ssim(x, x) == 1.0


def test_ssim_matches_loop_oracle(rng):
    x = rng.random((32, 32))
    y = np.clip(x + 0.1 * rng.normal(size=(32, 32)), 0, 1)
    assert abs(ssim(x, y) - ssim_oracle(x, y)) <= 1e-10


def test_ssim_inverted_texture():
    # dense structure makes the inverted image anti-correlated in every window
    x = gen_texture(64, 3)
    assert ssim(x, 1.0 - x) < 0.0


def test_ssim_symmetric(rng):
    x, y = rng.random((24, 24)), rng.random((24, 24))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_evaluate(rng):
    x = rng.random((16, 16))
    rep = evaluate(x + 0.1, x)
    assert rep.psnr_db == pytest.approx(20.0)
    assert rep.ssim <= 1.0


@pytest.mark.parametrize("gen", [gen_phantom, gen_texture])
def test_generators_deterministic(gen):
    assert np.array_equal(gen(64, 5), gen(64, 5))


@pytest.mark.parametrize("gen", [gen_phantom, gen_texture])
def test_generators_reject_small(gen):
    with pytest.raises(ValueError):
        gen(16, 0)


def test_phantom_range_and_variety():
    for s in range(20):
        a, b = gen_phantom(64, 2 * s), gen_phantom(64, 2 * s + 1)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert np.mean(a != b) >= 0.10


def test_texture_normalized():
    for s in range(5):
        t = gen_texture(64, s)
        assert t.min() == 0.0 and t.max() == 1.0


def test_distributions_separate_by_gradient():
    ph = np.mean([mean_gradient(gen_phantom(64, s)) for s in range(20)])
    tx = np.mean([mean_gradient(gen_texture(64, s)) for s in range(20)])
    assert tx >= 2 * ph


def test_make_dataset():
    a = make_dataset("phantom", 32, 4, 7)
    b = make_dataset("phantom", 32, 4, 7)
    assert len(a) == 4 and all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(a[0], a[1])
    assert make_dataset("texture", 32, 0, 1) == []
    with pytest.raises(KeyError):
        make_dataset("brain", 32, 1, 0)
