"""Single-coil CS-MRI measurement model ``A = M F`` on a radial k-space mask.

Measurements live on the full k-space grid with zeros off the mask, so
``A`` and its adjoint are shape-preserving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import dft2, idft2


@dataclass(frozen=True)
class SamplingMask:
    keep: np.ndarray
    num_lines: int = 0
    # set when the requested ratio could not be reached and the full grid was used
    saturated: bool = False

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        if keep.ndim != 2:
            raise ValueError(f"mask must be 2-D, got {keep.shape}")
        if not keep[0, 0]:
            raise ValueError("mask must keep the DC coefficient")
        object.__setattr__(self, "keep", keep)

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape

    @property
    def height(self) -> int:
        return self.keep.shape[0]

    @property
    def width(self) -> int:
        return self.keep.shape[1]

    @property
    def ratio(self) -> float:
        return float(self.keep.sum()) / self.keep.size


def full_mask(n: int, m: int | None = None) -> SamplingMask:
    return SamplingMask(np.ones((n, n if m is None else m), dtype=bool))


def _offset_from_seed(seed: int) -> float:
    return float(np.random.default_rng(seed).random())


def radial_mask(n: int, num_lines: int, seed: int, offset: float | None = None) -> SamplingMask:
    """Union of ``num_lines`` rasterized lines through the k-space centre.

    Line ``i`` has angle ``pi * (i + u) / num_lines`` where ``u`` in [0, 1) is
    drawn from ``seed`` unless ``offset`` is given.  Each line is marked at
    integer radii ``-R..R`` with ``R = ceil(n / sqrt(2))``, snapping to the
    nearest cell, and the result is moved to unshifted DFT ordering.
    """
    if n < 8:
        raise ValueError(f"image size must be >= 8, got {n}")
    if not 1 <= num_lines <= 2 * n:
        raise ValueError(f"num_lines must be in [1, {2 * n}], got {num_lines}")
    u = _offset_from_seed(seed) if offset is None else float(offset)
    centre = n // 2
    rmax = math.ceil(n / math.sqrt(2))
    r = np.arange(-rmax, rmax + 1, dtype=np.float64)
    theta = np.pi * (np.arange(num_lines) + u) / num_lines
    rows = centre + np.rint(np.outer(np.sin(theta), r)).astype(int)
    cols = centre + np.rint(np.outer(np.cos(theta), r)).astype(int)
    inside = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
    keep = np.zeros((n, n), dtype=bool)
    keep[rows[inside], cols[inside]] = True
    keep[centre, centre] = True
    return SamplingMask(np.fft.ifftshift(keep), num_lines=num_lines)


def mask_for_ratio(n: int, target_ratio: float, seed: int) -> SamplingMask:
    """Radial mask with the fewest lines whose sampling ratio reaches ``target_ratio``.

    If even ``2n`` lines fall short, the full grid is returned with
    ``saturated=True``.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError(f"target_ratio must be in (0, 1], got {target_ratio}")
    hi = 2 * n
    best = radial_mask(n, hi, seed)
    if best.ratio < target_ratio:
        return SamplingMask(np.ones((n, n), dtype=bool), num_lines=hi, saturated=True)
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        m = radial_mask(n, mid, seed)
        if m.ratio >= target_ratio:
            hi, best = mid, m
        else:
            lo = mid + 1
    return best


@dataclass(frozen=True)
class MeasurementOp:
    mask: SamplingMask
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def _check_shape(a: np.ndarray, op: MeasurementOp) -> None:
    if a.shape != op.shape:
        raise ValueError(f"array shape {a.shape} does not match operator shape {op.shape}")


def apply_A(x: np.ndarray, op: MeasurementOp) -> np.ndarray:
    """Masked unitary DFT of a real image, zeros off the mask."""
    x = np.asarray(x, dtype=np.float64)
    _check_shape(x, op)
    return np.where(op.mask.keep, dft2(x), 0.0)


def apply_A_adj(y: np.ndarray, op: MeasurementOp) -> np.ndarray:
    """Real part of the zero-filled inverse DFT."""
    y = np.asarray(y, dtype=np.complex128)
    _check_shape(y, op)
    return idft2(np.where(op.mask.keep, y, 0.0)).real


def datafit(x: np.ndarray, y: np.ndarray, op: MeasurementOp) -> float:
    """``0.5 * ||y - A x||^2``."""
    r = apply_A(x, op) - y
    return 0.5 * float(np.vdot(r, r).real)


def grad_datafit(x: np.ndarray, y: np.ndarray, op: MeasurementOp) -> np.ndarray:
    return apply_A_adj(apply_A(x, op) - y, op)


def simulate_measurement(x: np.ndarray, op: MeasurementOp, seed: int) -> np.ndarray:
    """``A x`` plus circular complex Gaussian noise (``E|e|^2 = sigma^2``) on kept entries."""
    y = apply_A(x, op)
    if op.noise_sigma == 0.0:
        return y
    rng = np.random.default_rng(seed)
    s = op.noise_sigma / math.sqrt(2.0)
    e = rng.normal(0.0, s, size=y.shape) + 1j * rng.normal(0.0, s, size=y.shape)
    return y + np.where(op.mask.keep, e, 0.0)
