"""Array substrate: unitary 2-D DFT and "same"-padded 2-D convolution with its VJPs.

Images are plain ``float64`` arrays of shape ``(H, W)``; k-space data are
``complex128`` arrays of the same shape.  Feature maps are ``(C, H, W)`` or,
for batched evaluation, ``(N, C, H, W)``.  Convolution uses the
cross-correlation convention (no kernel flip), as CNN libraries do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _check_2d(x: np.ndarray) -> None:
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {x.shape}")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError(f"zero-sized dimension in shape {x.shape}")


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def dft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT, scaled by ``1/sqrt(H*W)``.

    Power-of-two shapes go through the FFT; anything else falls back to a
    direct transform with dense DFT matrices.
    """
    x = np.asarray(x, dtype=np.complex128)
    _check_2d(x)
    h, w = x.shape
    if _is_pow2(h) and _is_pow2(w):
        return np.fft.fft2(x, norm="ortho")
    return _dft_matrix(h, -1.0) @ x @ _dft_matrix(w, -1.0)


def idft2(y: np.ndarray) -> np.ndarray:
    """Inverse (and adjoint) of :func:`dft2`."""
    y = np.asarray(y, dtype=np.complex128)
    _check_2d(y)
    h, w = y.shape
    if _is_pow2(h) and _is_pow2(w):
        return np.fft.ifft2(y, norm="ortho")
    return _dft_matrix(h, 1.0) @ y @ _dft_matrix(w, 1.0)


@dataclass
class ConvKernel:
    """Weights ``(out, in, kh, kw)`` and per-output-channel bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ValueError(f"kernel weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel spatial size must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weight.shape

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weight.copy(), self.bias.copy())


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"feature map must be (C,H,W) or (N,C,H,W), got {x.shape}")


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix ``(N, C*kh*kw, H*W)`` of a zero-padded batch ``(N, C, H, W)``."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * kh * kw, h * w)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image grid."""
    n, c, h, w = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, c, kh, kw, h, w)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + h, j : j + w] += cols[:, :, i, j]
    return xp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x: np.ndarray, kernel: ConvKernel, cols: np.ndarray | None = None) -> np.ndarray:
    """'Same' zero-padded cross-correlation plus bias.

    ``cols`` may carry a precomputed :func:`im2col` of ``x`` to skip the
    patch extraction.
    """
    xb, single = _as_batch(x)
    if xb.shape[1] != kernel.in_channels:
        raise ValueError(
            f"input has {xb.shape[1]} channels, kernel expects {kernel.in_channels}"
        )
    n, _, h, w = xb.shape
    cout, _, kh, kw = kernel.shape
    if cols is None:
        cols = im2col(xb, kh, kw)
    out = np.matmul(kernel.weight.reshape(cout, -1), cols)
    out += kernel.bias[None, :, None]
    out = out.reshape(n, cout, h, w)
    return out[0] if single else out


def conv2d_vjp_input(x_shape, kernel: ConvKernel, cotangent: np.ndarray) -> np.ndarray:
    """``v^T d(conv2d)/d(input)``; independent of the input values.

    ``x_shape`` may be the input array itself or its shape.
    """
    if isinstance(x_shape, np.ndarray):
        x_shape = x_shape.shape
    vb, single = _as_batch(cotangent)
    x_shape = tuple(x_shape)
    xshape4 = (1,) + x_shape if len(x_shape) == 3 else x_shape
    n, c, h, w = xshape4
    cout, cin, kh, kw = kernel.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if vb.shape != (n, cout, h, w):
        raise ValueError(f"cotangent shape {vb.shape} does not match output {(n, cout, h, w)}")
    dcols = np.matmul(kernel.weight.reshape(cout, -1).T, vb.reshape(n, cout, h * w))
    dx = col2im(dcols, xshape4, kh, kw)
    return dx[0] if single else dx


def conv2d_vjp_kernel(
    x: np.ndarray, kernel_shape, cotangent: np.ndarray, cols: np.ndarray | None = None
) -> ConvKernel:
    """``v^T d(conv2d)/d(weight, bias)`` returned as a :class:`ConvKernel`."""
    xb, _ = _as_batch(x)
    vb, _ = _as_batch(cotangent)
    cout, cin, kh, kw = kernel_shape
    n, c, h, w = xb.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if vb.shape != (n, cout, h, w):
        raise ValueError(f"cotangent shape {vb.shape} does not match output {(n, cout, h, w)}")
    if cols is None:
        cols = im2col(xb, kh, kw)
    v2 = vb.reshape(n, cout, h * w)
    dw = np.matmul(v2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel_shape)
    db = v2.sum(axis=(0, 2))
    return ConvKernel(dw, db)
