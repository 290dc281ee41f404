"""PnP-PGM operator and the fixed-point solvers used in both DEQ passes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser import DenoiserParams, Network
from .forward import MeasurementOp, grad_datafit

log = logging.getLogger(__name__)

_EPS = 1e-12
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """A fixed-point iteration blew up; carries the partial result."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass
class PnPConfig:
    gamma: float = 1.0
    max_iter: int = 100
    tol: float = 1e-6
    acceleration: str = "nesterov"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.acceleration not in ("plain", "nesterov"):
            raise ValueError(f"unknown acceleration {self.acceleration!r}")


@dataclass
class AndersonConfig:
    depth_m: int = 5
    damping_beta: float = 1.0
    reg_lambda: float = 1e-4
    max_iter: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if self.depth_m < 1:
            raise ValueError("depth_m must be >= 1")
        if not 0.0 < self.damping_beta <= 1.0:
            raise ValueError("damping_beta must be in (0, 1]")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be nonnegative")


@dataclass
class FixedPointResult:
    x_bar: np.ndarray
    residuals: list[float] = field(default_factory=list)
    iters_used: int = 0
    converged: bool = False

    @property
    def last_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(new), _EPS))


def _network(params):
    # anything with a ``forward`` method may stand in for a DenoiserParams
    return params if hasattr(params, "forward") else Network(params)


def pnp_operator(x, y, op: MeasurementOp, params: DenoiserParams | Network, gamma: float):
    """One PnP-PGM step ``D(x - gamma * grad g(x))``."""
    return _network(params).forward(x - gamma * grad_datafit(x, y, op))


def make_pnp_map(y, op: MeasurementOp, params: DenoiserParams | Network, gamma: float):
    net = _network(params)

    def T(x):
        return net.forward(x - gamma * grad_datafit(x, y, op))

    return T


def iterate(T: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, cfg: PnPConfig) -> FixedPointResult:
    """Plain or Nesterov-accelerated fixed-point iteration of ``T`` from ``x0``.

    The residual at step k is ``||T(s_k) - s_k|| / ||T(s_k)||`` where ``s_k`` is
    the point ``T`` was applied to; in plain mode that is the relative change
    between iterates. Measuring at ``s_k`` keeps the stopping test honest
    under momentum, where successive iterates can agree while neither is a
    fixed point.
    """
    x_prev = np.asarray(x0, dtype=np.float64)
    s = x_prev
    t = 1.0
    res = FixedPointResult(x_prev)
    scale = max(float(np.linalg.norm(x_prev)), 1.0)
    for k in range(cfg.max_iter):
        x = T(s)
        r = _rel_change(x, s)
        res.residuals.append(r)
        res.iters_used = k + 1
        res.x_bar = x
        if k == 0:
            scale = max(scale, float(np.linalg.norm(x)))
        if not np.isfinite(r) or r > DIVERGENCE_LIMIT or np.linalg.norm(x) > DIVERGENCE_LIMIT * scale:
            raise DivergenceError(f"fixed-point iteration diverged at step {k + 1} (residual {r:g})", res)
        if r <= cfg.tol:
            res.converged = True
            break
        if cfg.acceleration == "nesterov":
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            s = x + ((t - 1.0) / t_next) * (x - x_prev)
            t = t_next
        else:
            s = x
        x_prev = x
    return res


def run_pnp(x0, y, op: MeasurementOp, params: DenoiserParams, cfg: PnPConfig | None = None) -> FixedPointResult:
    """Reconstruct by iterating the PnP-PGM operator to its fixed point.

    ``x0=None`` starts from the zero image.
    """
    cfg = cfg or PnPConfig()
    if x0 is None:
        x0 = np.zeros(op.shape)
    return iterate(make_pnp_map(y, op, params, cfg.gamma), x0, cfg)


def _anderson_weights(F: np.ndarray, reg: float) -> np.ndarray | None:
    """Solve ``min ||F a||^2 + reg ||F^T F|| ||a||^2`` s.t. ``sum(a) = 1`` via its KKT system.

    The Tikhonov weight is relative to ``||F^T F||`` so it stays meaningful
    as residuals shrink.
    """
    m = F.shape[1]
    FtF = F.T @ F
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = 2.0 * (FtF + reg * np.linalg.norm(FtF, 2) * np.eye(m))
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:m]


def anderson_solve(G: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, cfg: AndersonConfig | None = None) -> FixedPointResult:
    """Anderson(m)-accelerated iteration for ``x = G(x)``.

    Works on arrays of any shape; they are flattened internally.
    """
    cfg = cfg or AndersonConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    shape = x0.shape
    x = x0.ravel()
    xs, gs = [], []
    res = FixedPointResult(x0)
    for k in range(cfg.max_iter):
        g = np.asarray(G(x.reshape(shape)), dtype=np.float64).ravel()
        xs.append(x)
        gs.append(g)
        if len(xs) > cfg.depth_m:
            xs.pop(0)
            gs.pop(0)
        X = np.stack(xs, axis=1)
        Gm = np.stack(gs, axis=1)
        alpha = _anderson_weights(Gm - X, cfg.reg_lambda)
        if alpha is None:
            log.debug("singular Anderson system at step %d, taking a plain step", k + 1)
            x_new = g
        else:
            b = cfg.damping_beta
            x_new = (1.0 - b) * (X @ alpha) + b * (Gm @ alpha)
        r = _rel_change(x_new, x)
        res.residuals.append(r)
        res.iters_used = k + 1
        res.x_bar = x_new.reshape(shape)
        if not np.isfinite(r) or r > DIVERGENCE_LIMIT:
            raise DivergenceError(f"Anderson iteration diverged at step {k + 1} (residual {r:g})", res)
        x = x_new
        if r <= cfg.tol:
            res.converged = True
            break
    return res
