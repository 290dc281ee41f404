"""DnCNN-style residual denoiser with spectral normalization and hand-written VJPs.

The network is ``D(x) = x - net(x)`` where ``net`` is
conv -> ReLU -> (conv -> ReLU) * (depth - 2) -> conv.  Each layer's weight is
divided by ``max(1, sigma_hat / lipschitz_target)`` at evaluation time, with
``sigma_hat = ||K^T u||`` estimated from the stored power-iteration vector ``u``.
That scale is treated as a constant when differentiating.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConvKernel, conv2d, conv2d_vjp_input, conv2d_vjp_kernel, im2col


@dataclass
class DenoiserConfig:
    depth: int = 5
    channels: int = 16
    kernel_size: int = 3
    residual: bool = True
    lipschitz_target: float = 1.0
    power_iters: int = 1
    # spatial size of the feature maps on which layer operator norms are estimated
    sn_size: int = 32
    spectral_norm: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.lipschitz_target <= 0:
            raise ValueError("lipschitz_target must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be positive")

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        k = self.kernel_size
        chans = [1] + [self.channels] * (self.depth - 1) + [1]
        return [(chans[i + 1], chans[i], k, k) for i in range(self.depth)]


@dataclass
class DenoiserParams:
    layers: list[ConvKernel]
    sn_state: list[np.ndarray]
    config: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if len(self.layers) != len(self.sn_state):
            raise ValueError("one power-iteration vector is needed per layer")
        if self.layers[0].in_channels != 1 or self.layers[-1].out_channels != 1:
            raise ValueError("network must map 1 channel to 1 channel")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError("consecutive layer channel counts do not match")
        for k, u in zip(self.layers, self.sn_state):
            if u.ndim != 3 or u.shape[0] != k.out_channels:
                raise ValueError(f"sn_state shape {u.shape} does not fit layer {k.shape}")

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            [k.copy() for k in self.layers],
            [u.copy() for u in self.sn_state],
            copy.copy(self.config),
        )

    def num_params(self) -> int:
        return sum(k.weight.size + k.bias.size for k in self.layers)


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """He-normal weights, zero biases, random unit power-iteration vectors."""
    rng = np.random.default_rng(seed)
    layers, state = [], []
    s = config.sn_size
    for shape in config.layer_shapes():
        cout, cin, kh, kw = shape
        std = np.sqrt(2.0 / (cin * kh * kw))
        layers.append(ConvKernel(rng.normal(0.0, std, size=shape), np.zeros(cout)))
        u = rng.normal(size=(cout, s, s))
        state.append(u / np.linalg.norm(u))
    return DenoiserParams(layers, state, config)


# -- gradients as flat vectors ---------------------------------------------------


def grad_to_vector(grads: list[ConvKernel]) -> np.ndarray:
    return np.concatenate([np.concatenate([g.weight.ravel(), g.bias]) for g in grads])


def params_to_vector(params: DenoiserParams) -> np.ndarray:
    return grad_to_vector(params.layers)


def vector_to_layers(vec: np.ndarray, like: list[ConvKernel]) -> list[ConvKernel]:
    out, pos = [], 0
    for k in like:
        nw, nb = k.weight.size, k.bias.size
        w = vec[pos : pos + nw].reshape(k.weight.shape)
        b = vec[pos + nw : pos + nw + nb]
        pos += nw + nb
        out.append(ConvKernel(w.copy(), b.copy()))
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, parameters need {pos}")
    return out


def with_vector(params: DenoiserParams, vec: np.ndarray) -> DenoiserParams:
    """Copy of ``params`` with weights and biases replaced from a flat vector."""
    new = params.copy()
    new.layers = vector_to_layers(vec, params.layers)
    return new


# -- spectral normalization ------------------------------------------------------


def _kt(kernel: ConvKernel, u: np.ndarray) -> np.ndarray:
    cin = kernel.in_channels
    return conv2d_vjp_input((cin,) + u.shape[1:], kernel, u)


def _k(kernel: ConvKernel, v: np.ndarray) -> np.ndarray:
    lin = ConvKernel(kernel.weight, np.zeros(kernel.out_channels))
    return conv2d(v, lin)


def sigma_estimate(kernel: ConvKernel, u: np.ndarray) -> float:
    """Operator-norm estimate ``||K^T u||`` for a unit vector ``u``."""
    return float(np.linalg.norm(_kt(kernel, u)))


def power_iteration(kernel: ConvKernel, u: np.ndarray, iters: int) -> np.ndarray:
    """Advance ``u`` by ``iters`` steps of ``u <- K K^T u / ||K K^T u||``."""
    for _ in range(iters):
        w = _k(kernel, _kt(kernel, u))
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        u = w / nrm
    return u


def layer_scales(params: DenoiserParams) -> list[float]:
    cfg = params.config
    if not cfg.spectral_norm:
        return [1.0] * len(params.layers)
    return [
        max(1.0, sigma_estimate(k, u) / cfg.lipschitz_target)
        for k, u in zip(params.layers, params.sn_state)
    ]


def spectral_normalize(params: DenoiserParams) -> DenoiserParams:
    """Run the power iteration and rescale stored weights so each ``sigma_hat <= target``.

    Returns a new params object; the input is left untouched.
    """
    cfg = params.config
    new = params.copy()
    for i, (k, u) in enumerate(zip(new.layers, new.sn_state)):
        u = power_iteration(k, u, cfg.power_iters)
        new.sn_state[i] = u
        sigma = sigma_estimate(k, u)
        scale = max(1.0, sigma / cfg.lipschitz_target)
        if scale > 1.0:
            k.weight = k.weight / scale
    return new


# -- network evaluation ------------------------------------------------------------


class Network:
    """Params frozen into effective (normalized) kernels, ready for repeated evaluation.

    Building one costs a transposed convolution per layer for the norm
    estimates, so solvers build it once per parameter value.
    """

    def __init__(self, params: DenoiserParams):
        self.params = params
        self.residual = params.config.residual
        self.scales = layer_scales(params)
        self.kernels = [
            ConvKernel(k.weight / s, k.bias) if s != 1.0 else k
            for k, s in zip(params.layers, self.scales)
        ]

    def _run(self, x: np.ndarray, keep: bool):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        h = x[None, None] if single else x[:, None]
        cache = []
        last = len(self.kernels) - 1
        for i, k in enumerate(self.kernels):
            cols = im2col(h, k.shape[2], k.shape[3])
            a = conv2d(h, k, cols=cols)
            mask = None
            if i < last:
                mask = a > 0
                a = a * mask
            if keep:
                cache.append((h.shape, cols, mask))
            h = a
        net = h[0, 0] if single else h[:, 0]
        out = x - net if self.residual else net
        return out, cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._run(x, keep=False)[0]

    def net(self, x: np.ndarray) -> np.ndarray:
        """The pre-residual branch alone."""
        out = self.forward(x)
        return np.asarray(x) - out if self.residual else out

    def linearize(self, x: np.ndarray) -> "Linearization":
        out, cache = self._run(x, keep=True)
        return Linearization(self, np.asarray(x, dtype=np.float64), out, cache)


class Linearization:
    """Forward activations at a point, for repeated VJPs."""

    def __init__(self, network: Network, x, out, cache):
        self.network = network
        self.x = x
        self.out = out
        self.cache = cache

    def _backprop(self, v: np.ndarray, want_params: bool):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.x.shape:
            raise ValueError(f"cotangent shape {v.shape} does not match input {self.x.shape}")
        single = v.ndim == 2
        sign = -1.0 if self.network.residual else 1.0
        g = sign * (v[None, None] if single else v[:, None])
        kernels = self.network.kernels
        grads = [None] * len(kernels)
        for i in range(len(kernels) - 1, -1, -1):
            hshape, cols, mask = self.cache[i]
            if mask is not None:
                g = g * mask
            if want_params:
                gk = conv2d_vjp_kernel(np.empty(hshape), kernels[i].shape, g, cols=cols)
                s = self.network.scales[i]
                if s != 1.0:
                    gk.weight /= s
                grads[i] = gk
            if i > 0 or not want_params:
                g = conv2d_vjp_input(hshape, kernels[i], g)
        return g, grads

    def vjp_input(self, v: np.ndarray) -> np.ndarray:
        g, _ = self._backprop(v, want_params=False)
        dx = g[0, 0] if v.ndim == 2 else g[:, 0]
        return v + dx if self.network.residual else dx

    def vjp_params(self, v: np.ndarray) -> list[ConvKernel]:
        return self._backprop(v, want_params=True)[1]


def denoise(x: np.ndarray, params: DenoiserParams) -> np.ndarray:
    """Apply the denoiser to an ``(H, W)`` image or an ``(N, H, W)`` batch."""
    return Network(params).forward(x)


def denoiser_vjp_input(x: np.ndarray, params: DenoiserParams, v: np.ndarray) -> np.ndarray:
    """``v^T dD/dx`` at ``x``."""
    return Network(params).linearize(x).vjp_input(v)


def denoiser_vjp_params(x: np.ndarray, params: DenoiserParams, v: np.ndarray) -> list[ConvKernel]:
    """``v^T dD/dtheta`` at ``x``, one :class:`ConvKernel` of gradients per layer."""
    return Network(params).linearize(x).vjp_params(v)
