"""Implicit (deep-equilibrium) differentiation of losses evaluated at a PnP fixed point.

For a loss ``L(T(x_bar))`` with ``x_bar = T(x_bar)``, the total derivative in
the parameters is ``(dT/dtheta)^T w`` where ``w`` solves ``w = J^T w + grad L``
and ``J = dT/dx`` at ``x_bar``.  Differentiating ``x_bar = T(x_bar)`` gives
``dx_bar = (I - J)^{-1} dT/dtheta``, and the outer application contributes
``J dx_bar + dT/dtheta = (I - J)^{-1} dT/dtheta`` again, so a single adjoint
solve covers both the explicit and the implicit dependence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser import DenoiserParams, Network
from .fixed_point import AndersonConfig, FixedPointResult, anderson_solve
from .forward import MeasurementOp, apply_A, apply_A_adj, grad_datafit

log = logging.getLogger(__name__)

LOSSES = ("l2sq", "norml1")


@dataclass
class DeqBackwardConfig:
    anderson: AndersonConfig = field(default_factory=AndersonConfig)
    jacobian_mode: str = "adjoint_fixed_point"

    def __post_init__(self):
        if self.jacobian_mode != "adjoint_fixed_point":
            raise ValueError(f"unsupported jacobian_mode {self.jacobian_mode!r}")


@dataclass
class DeqGradient:
    grad: list
    loss: float
    adjoint: FixedPointResult


def _network(params):
    # anything with ``forward``/``linearize`` may stand in for a DenoiserParams
    return params if hasattr(params, "linearize") else Network(params)


def _pre_denoiser(x_bar, y, op, gamma):
    return x_bar - gamma * grad_datafit(x_bar, y, op)


def measurement_loss(u: np.ndarray, y: np.ndarray, op: MeasurementOp, loss: str = "l2sq") -> float:
    """``||A u - y||_2^2``, or ``||A u - y||_1 / ||y||_1`` for ``loss="norml1"``."""
    r = apply_A(u, op) - y
    if loss == "l2sq":
        return float(np.vdot(r, r).real)
    if loss == "norml1":
        return float(np.abs(r).sum() / np.abs(y).sum())
    raise ValueError(f"unknown loss {loss!r}")


def measurement_loss_grad(u: np.ndarray, y: np.ndarray, op: MeasurementOp, loss: str = "l2sq") -> np.ndarray:
    r = apply_A(u, op) - y
    if loss == "l2sq":
        return 2.0 * apply_A_adj(r, op)
    if loss == "norml1":
        mag = np.abs(r)
        unit = np.divide(r, mag, out=np.zeros_like(r), where=mag > 0)
        return apply_A_adj(unit, op) / np.abs(y).sum()
    raise ValueError(f"unknown loss {loss!r}")


def loss_selfsup(x_bar, y, op: MeasurementOp, params, gamma: float, loss: str = "l2sq") -> float:
    """Self-supervised measurement loss of one more PnP step from ``x_bar``."""
    u = _network(params).forward(_pre_denoiser(x_bar, y, op, gamma))
    return measurement_loss(u, y, op, loss)


def loss_cotangent(x_bar, y, op: MeasurementOp, params, gamma: float, loss: str = "l2sq") -> np.ndarray:
    """Gradient of the self-supervised loss with respect to ``u = T(x_bar)``."""
    u = _network(params).forward(_pre_denoiser(x_bar, y, op, gamma))
    return measurement_loss_grad(u, y, op, loss)


def solve_adjoint(vjp_state: Callable[[np.ndarray], np.ndarray], v: np.ndarray, cfg: AndersonConfig) -> FixedPointResult:
    """Solve ``w = J^T w + v`` with Anderson acceleration, starting from ``w = v``."""
    return anderson_solve(lambda w: vjp_state(w) + v, v, cfg)


class PnPLinearization:
    """VJPs of ``T(x) = D(x - gamma grad g(x))`` at a fixed point."""

    def __init__(self, x_bar, y, op: MeasurementOp, params, gamma: float):
        self.op = op
        self.gamma = gamma
        self.z = _pre_denoiser(x_bar, y, op, gamma)
        self.lin = _network(params).linearize(self.z)

    @property
    def output(self) -> np.ndarray:
        return self.lin.out

    def vjp_state(self, w: np.ndarray) -> np.ndarray:
        q = self.lin.vjp_input(w)
        # (I - gamma A^H A) is self-adjoint
        return q - self.gamma * apply_A_adj(apply_A(q, self.op), self.op)

    def vjp_params(self, w: np.ndarray):
        return self.lin.vjp_params(w)


def adjoint_solve(x_bar, v, params, y, op: MeasurementOp, gamma: float, cfg: DeqBackwardConfig | None = None) -> FixedPointResult:
    cfg = cfg or DeqBackwardConfig()
    lin = PnPLinearization(x_bar, y, op, params, gamma)
    return solve_adjoint(lin.vjp_state, np.asarray(v, dtype=np.float64), cfg.anderson)


def _implicit_grad(lin: PnPLinearization, v: np.ndarray, cfg: DeqBackwardConfig, loss_value: float) -> DeqGradient:
    if not np.any(v):
        zero = lin.vjp_params(np.zeros_like(v))
        return DeqGradient(zero, loss_value, FixedPointResult(np.zeros_like(v), [0.0], 1, True))
    adj = solve_adjoint(lin.vjp_state, v, cfg.anderson)
    if not adj.converged:
        log.info(
            "adjoint solve stopped after %d iterations at residual %.3g",
            adj.iters_used,
            adj.last_residual,
        )
    return DeqGradient(lin.vjp_params(adj.x_bar), loss_value, adj)


def deq_gradient(x_bar, y, op: MeasurementOp, params, gamma: float, cfg: DeqBackwardConfig | None = None, loss: str = "l2sq") -> DeqGradient:
    """Parameter gradient of the self-supervised loss through the fixed point ``x_bar``."""
    cfg = cfg or DeqBackwardConfig()
    lin = PnPLinearization(x_bar, y, op, params, gamma)
    u = lin.output
    v = measurement_loss_grad(u, y, op, loss)
    return _implicit_grad(lin, v, cfg, measurement_loss(u, y, op, loss))


def deq_gradient_supervised(x_bar, x_star, y, op: MeasurementOp, params, gamma: float, cfg: DeqBackwardConfig | None = None) -> DeqGradient:
    """Same machinery for the supervised loss ``0.5 ||T(x_bar) - x_star||^2``."""
    cfg = cfg or DeqBackwardConfig()
    lin = PnPLinearization(x_bar, y, op, params, gamma)
    v = lin.output - x_star
    return _implicit_grad(lin, v, cfg, 0.5 * float(np.sum(v * v)))
