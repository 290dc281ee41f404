"""Test-time training of a PnP prior on a single measurement."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .deq import DeqBackwardConfig, deq_gradient, loss_selfsup
from .denoiser import DenoiserParams, Network, params_to_vector, spectral_normalize
from .fixed_point import DivergenceError, PnPConfig, iterate, make_pnp_map
from .forward import MeasurementOp
from .metrics import psnr, ssim
from .numerics import ConvKernel

log = logging.getLogger(__name__)


@dataclass
class TTTConfig:
    num_iter: int = 50
    lr: float = 1e-5
    optimizer: str = "sgd"
    loss: str = "l2sq"
    record_every: int = 1
    renormalize: bool = True

    def __post_init__(self):
        if self.num_iter < 0:
            raise ValueError("num_iter must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss not in ("l2sq", "norml1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be positive")


@dataclass
class TTTRecord:
    """State after ``index`` parameter updates.

    ``loss`` is the self-supervised loss at that iterate (the value the next
    update differentiates); ``adjoint_residual`` belongs to the update that
    produced this iterate and is NaN for index 0.
    """

    index: int
    loss: float
    psnr: float = float("nan")
    ssim: float = float("nan")
    forward_residual: float = float("nan")
    adjoint_residual: float = float("nan")
    elapsed_s: float = float("nan")


@dataclass
class TTTTrace:
    records: list[TTTRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def indices(self) -> list[int]:
        return [r.index for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def psnrs(self) -> list[float]:
        return [r.psnr for r in self.records]


@dataclass
class TTTResult:
    params: DenoiserParams
    x: np.ndarray
    trace: TTTTrace
    iterates: list[np.ndarray] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)


class TTTError(RuntimeError):
    """An inner solve diverged at TTT iteration ``iteration``.

    ``result`` holds everything recorded before the failure.
    """

    def __init__(self, msg, result: TTTResult, iteration: int = 0):
        super().__init__(msg)
        self.result = result
        self.iteration = iteration


def sgd_step(params: DenoiserParams, grad: list[ConvKernel], lr: float) -> DenoiserParams:
    if len(grad) != len(params.layers):
        raise ValueError("gradient does not match the parameter layout")
    new = params.copy()
    for k, g in zip(new.layers, grad):
        if g.weight.shape != k.weight.shape or g.bias.shape != k.bias.shape:
            raise ValueError(f"gradient shape {g.weight.shape} does not match layer {k.weight.shape}")
        k.weight = k.weight - lr * g.weight
        k.bias = k.bias - lr * g.bias
    return new


def best_iterate(trace: TTTTrace, results: list[np.ndarray], ground_truth=None) -> tuple[int, np.ndarray]:
    """Iterate with the highest recorded PSNR; earliest wins ties.

    ``results`` is aligned with ``trace.records``.
    """
    vals = trace.psnrs
    if not vals or all(math.isnan(v) for v in vals):
        raise ValueError("trace has no PSNR values; run with ground truth")
    best = max(range(len(vals)), key=lambda i: (vals[i], -i) if not math.isnan(vals[i]) else (-math.inf, -i))
    return best, results[best]


def ttt_adapt(
    x0,
    y: np.ndarray,
    op: MeasurementOp,
    params: DenoiserParams,
    pnp_cfg: PnPConfig | None = None,
    deq_cfg: DeqBackwardConfig | None = None,
    ttt_cfg: TTTConfig | None = None,
    ground_truth: np.ndarray | None = None,
    keep_snapshots: bool = False,
) -> TTTResult:
    """Adapt a copy of ``params`` to one measurement and reconstruct with it.

    The caller's ``params`` is never modified.
    """
    pnp_cfg = pnp_cfg or PnPConfig()
    deq_cfg = deq_cfg or DeqBackwardConfig()
    ttt_cfg = ttt_cfg or TTTConfig()
    if x0 is None:
        x0 = np.zeros(op.shape)
    theta = params.copy()
    gamma = pnp_cfg.gamma
    result = TTTResult(theta, np.asarray(x0), TTTTrace())
    start = time.perf_counter()

    def solve(p):
        return iterate(make_pnp_map(y, op, Network(p), gamma), x0, pnp_cfg)

    def record(i, x, p, fwd, adj_res):
        rec = TTTRecord(i, loss_selfsup(x, y, op, p, gamma, ttt_cfg.loss))
        rec.forward_residual = fwd.last_residual
        rec.adjoint_residual = adj_res
        rec.elapsed_s = time.perf_counter() - start
        if ground_truth is not None:
            rec.psnr = psnr(x, ground_truth)
            rec.ssim = ssim(x, ground_truth)
        result.trace.records.append(rec)
        result.iterates.append(x)
        if keep_snapshots:
            result.snapshots.append(params_to_vector(p))

    try:
        fwd = solve(theta)
    except DivergenceError as e:
        raise TTTError(f"initial PnP solve diverged: {e}", result, 0) from e
    x = fwd.x_bar
    result.x = x
    record(0, x, theta, fwd, float("nan"))
    n = ttt_cfg.num_iter
    for i in range(1, n + 1):
        g = deq_gradient(x, y, op, theta, gamma, deq_cfg, loss=ttt_cfg.loss)
        theta = sgd_step(theta, g.grad, ttt_cfg.lr)
        # a zero step leaves nothing to renormalize
        if ttt_cfg.lr > 0 and ttt_cfg.renormalize and theta.config.spectral_norm:
            theta = spectral_normalize(theta)
        result.params = theta
        try:
            fwd = solve(theta)
        except DivergenceError as e:
            raise TTTError(f"PnP solve diverged at TTT iteration {i}: {e}", result, i) from e
        x = fwd.x_bar
        result.x = x
        if i % ttt_cfg.record_every == 0 or i == n:
            record(i, x, theta, fwd, g.adjoint.last_residual)
    return result
