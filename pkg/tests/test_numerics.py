import numpy as np
import pytest

from pnp_ttt.numerics import ConvKernel, conv2d, conv2d_vjp_input, conv2d_vjp_kernel, dft2, idft2

from conftest import direct_dft2, naive_conv2d, rel_err


def rand_complex(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_dft_of_constant_is_dc_only():
    x = np.full((4, 4), 2.5)
    y = dft2(x)
    assert y[0, 0] == pytest.approx(4 * 2.5, abs=1e-14)
    y[0, 0] = 0
    assert np.abs(y).max() < 1e-14


@pytest.mark.parametrize("n", [4, 8, 16])
def test_dft_matches_direct_sum(rng, n):
    x = rand_complex(rng, (n, n))
    assert np.abs(dft2(x) - direct_dft2(x)).max() <= 1e-12


@pytest.mark.parametrize("shape", [(6, 10), (5, 8), (3, 3)])
def test_non_power_of_two_fallback(rng, shape):
    x = rand_complex(rng, shape)
    assert np.abs(dft2(x) - direct_dft2(x)).max() <= 1e-12
    assert np.abs(idft2(dft2(x)) - x).max() <= 1e-12


def test_parseval_many_inputs(rng):
    for _ in range(100):
        x = rand_complex(rng, (16, 16))
        assert rel_err(np.linalg.norm(dft2(x)), np.linalg.norm(x)) <= 1e-12


def test_inverse_and_adjoint(rng):
    x = rand_complex(rng, (8, 8))
    assert np.abs(idft2(dft2(x)) - x).max() <= 1e-12
    a, b = rand_complex(rng, (8, 8)), rand_complex(rng, (8, 8))
    lhs = np.vdot(b, dft2(a))
    rhs = np.vdot(idft2(b), a)
    assert abs(lhs - rhs) / abs(lhs) <= 1e-12


def test_inverse_of_dc_delta():
    y = np.zeros((4, 8), dtype=complex)
    y[0, 0] = 3.0
    np.testing.assert_allclose(idft2(y), np.full((4, 8), 3.0 / np.sqrt(32)), atol=1e-15)


@pytest.mark.parametrize("shape", [(0, 4), (4, 0)])
def test_zero_dimension_rejected(shape):
    with pytest.raises(ValueError):
        dft2(np.zeros(shape))
    with pytest.raises(ValueError):
        idft2(np.zeros(shape))


def random_kernel(rng, cout, cin, k=3):
    return ConvKernel(rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout))


def test_identity_kernel():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    k = ConvKernel(w, np.zeros(1))
    x = np.random.default_rng(0).normal(size=(1, 7, 5))
    np.testing.assert_array_equal(conv2d(x, k), x)
    v = np.random.default_rng(1).normal(size=(1, 7, 5))
    np.testing.assert_array_equal(conv2d_vjp_input(x, k, v), v)


def test_conv_matches_nested_loops(rng):
    k = random_kernel(rng, 2, 2)
    x = rng.normal(size=(2, 8, 8))
    assert np.abs(conv2d(x, k) - naive_conv2d(x, k.weight, k.bias)).max() <= 1e-13


def test_conv_batched_matches_single(rng):
    k = random_kernel(rng, 3, 2)
    xb = rng.normal(size=(4, 2, 6, 6))
    out = conv2d(xb, k)
    for i in range(4):
        np.testing.assert_allclose(out[i], conv2d(xb[i], k), rtol=0, atol=1e-14)


def test_bias_only_kernel():
    k = ConvKernel(np.zeros((3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]))
    out = conv2d(np.random.default_rng(0).normal(size=(2, 5, 5)), k)
    for c, b in enumerate(k.bias):
        assert np.all(out[c] == b)


def test_channel_mismatch():
    k = ConvKernel(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        conv2d(np.zeros((3, 4, 4)), k)
    with pytest.raises(ValueError):
        conv2d_vjp_input((3, 4, 4), k, np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        conv2d_vjp_kernel(np.zeros((2, 4, 4)), k.shape, np.zeros((2, 4, 4)))


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((1, 1, 2, 2)), np.zeros(1))


def test_vjp_input_adjoint_identity(rng):
    for _ in range(10):
        k = random_kernel(rng, 3, 2)
        lin = ConvKernel(k.weight, np.zeros(3))
        x = rng.normal(size=(2, 8, 8))
        v = rng.normal(size=(3, 8, 8))
        lhs = np.sum(conv2d(x, lin) * v)
        rhs = np.sum(x * conv2d_vjp_input(x, k, v))
        assert abs(lhs - rhs) / abs(lhs) <= 1e-12


def test_vjp_input_equals_flipped_transposed_conv(rng):
    k = random_kernel(rng, 3, 2)
    v = rng.normal(size=(3, 6, 6))
    flipped = ConvKernel(k.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), np.zeros(2))
    np.testing.assert_allclose(conv2d_vjp_input((2, 6, 6), k, v), conv2d(v, flipped), atol=1e-13)


def test_vjp_input_finite_differences(rng):
    k = random_kernel(rng, 2, 2)
    x = rng.normal(size=(2, 5, 5))
    v = rng.normal(size=(2, 5, 5))
    g = conv2d_vjp_input(x, k, v)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd[idx] = (np.sum(conv2d(x + e, k) * v) - np.sum(conv2d(x - e, k) * v)) / (2 * h)
    assert rel_err(g, fd) <= 1e-6


def test_vjp_kernel_zero_cotangent(rng):
    k = random_kernel(rng, 2, 3)
    g = conv2d_vjp_kernel(rng.normal(size=(3, 6, 6)), k.shape, np.zeros((2, 6, 6)))
    assert not np.any(g.weight) and not np.any(g.bias)


def test_vjp_kernel_finite_differences(rng):
    k = random_kernel(rng, 2, 2)
    x = rng.normal(size=(2, 6, 6))
    v = rng.normal(size=(2, 6, 6))
    g = conv2d_vjp_kernel(x, k.shape, v)
    h = 1e-6

    def f(weight, bias):
        return np.sum(conv2d(x, ConvKernel(weight, bias)) * v)

    fdw = np.zeros_like(k.weight)
    for idx in np.ndindex(k.weight.shape):
        e = np.zeros_like(k.weight)
        e[idx] = h
        fdw[idx] = (f(k.weight + e, k.bias) - f(k.weight - e, k.bias)) / (2 * h)
    fdb = np.zeros_like(k.bias)
    for i in range(k.bias.size):
        e = np.zeros_like(k.bias)
        e[i] = h
        fdb[i] = (f(k.weight, k.bias + e) - f(k.weight, k.bias - e)) / (2 * h)
    assert rel_err(g.weight, fdw) <= 1e-6
    assert rel_err(g.bias, fdb) <= 1e-6


def test_vjp_kernel_adjoint_identity(rng):
    k = random_kernel(rng, 3, 2)
    dk = random_kernel(rng, 3, 2)
    x = rng.normal(size=(2, 7, 7))
    v = rng.normal(size=(3, 7, 7))
    # conv2d is linear in (weight, bias): <conv(x, dK), v> = <dK, vjp>
    lhs = np.sum(conv2d(x, dk) * v)
    g = conv2d_vjp_kernel(x, k.shape, v)
    rhs = np.sum(dk.weight * g.weight) + np.sum(dk.bias * g.bias)
    assert abs(lhs - rhs) / abs(lhs) <= 1e-12


def test_vjp_kernel_bias_of_constant_cotangent():
    k = ConvKernel(np.zeros((2, 1, 3, 3)), np.zeros(2))
    g = conv2d_vjp_kernel(np.ones((1, 5, 7)), k.shape, np.full((2, 5, 7), 0.25))
    np.testing.assert_allclose(g.bias, [0.25 * 35, 0.25 * 35])


def test_deterministic(rng):
    k = random_kernel(rng, 4, 4)
    x = rng.normal(size=(4, 16, 16))
    assert np.array_equal(conv2d(x, k), conv2d(x.copy(), k.copy()))
    z = rand_complex(rng, (16, 16))
    assert np.array_equal(dft2(z), dft2(z.copy()))
