"""Pre-training denoiser priors as AWGN removers on image patches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserParams, Network, grad_to_vector, params_to_vector, spectral_normalize, with_vector
from .metrics import psnr

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    noise_sigma: float = 5.0 / 255.0
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch_size: int = 32
    patches_per_image: int = 8
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainReport:
    epoch_mse: list[float] = field(default_factory=list)
    val_psnr: float = float("nan")
    val_psnr_noisy: float = float("nan")
    skipped_images: int = 0


def make_training_pairs(images, cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random ``patch_size`` crops with i.i.d. Gaussian noise added (no clipping)."""
    rng = np.random.default_rng(cfg.seed)
    p = cfg.patch_size
    pairs, skipped = [], 0
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape
        if h < p or w < p:
            skipped += 1
            continue
        for _ in range(cfg.patches_per_image):
            i = int(rng.integers(0, h - p + 1))
            j = int(rng.integers(0, w - p + 1))
            clean = img[i : i + p, j : j + p].copy()
            noisy = clean + rng.normal(0.0, cfg.noise_sigma, size=clean.shape) if cfg.noise_sigma > 0 else clean.copy()
            pairs.append((noisy, clean))
    if skipped:
        log.warning("skipped %d image(s) smaller than the %dx%d patch size", skipped, p, p)
    return pairs


def batch_loss_and_grad(params: DenoiserParams, noisy: np.ndarray, clean: np.ndarray):
    """Mean over the batch of ``0.5 ||D(noisy) - clean||^2`` and its flat parameter gradient."""
    lin = Network(params).linearize(noisy)
    r = lin.out - clean
    n = noisy.shape[0]
    loss = 0.5 * float(np.sum(r * r)) / n
    grad = grad_to_vector(lin.vjp_params(r / n))
    return loss, grad, float(np.mean(r * r))


def _split(pairs, frac: float):
    n_val = int(round(frac * len(pairs))) if len(pairs) > 1 else 0
    n_val = min(n_val, len(pairs) - 1) if pairs else 0
    cut = len(pairs) - n_val
    return pairs[:cut], pairs[cut:]


def train_denoiser(params: DenoiserParams, pairs, cfg: TrainConfig) -> tuple[DenoiserParams, TrainReport]:
    """Minibatch Adam/SGD on the denoising loss, spectrally renormalizing after each step."""
    report = TrainReport()
    params = params.copy()
    train, val = _split(list(pairs), cfg.val_fraction)
    if cfg.epochs == 0 or not train:
        return params, report
    rng = np.random.default_rng(cfg.seed + 1)
    noisy_all = np.stack([p[0] for p in train])
    clean_all = np.stack([p[1] for p in train])
    theta = params_to_vector(params)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        mse_sum, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, g, mse = batch_loss_and_grad(params, noisy_all[idx], clean_all[idx])
            if not math.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}")
            mse_sum += mse * len(idx)
            count += len(idx)
            step += 1
            if cfg.optimizer == "adam":
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1**step)
                vhat = v / (1 - cfg.beta2**step)
                theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            else:
                theta = theta - cfg.lr * g
            params = with_vector(params, theta)
            if params.config.spectral_norm:
                params = spectral_normalize(params)
                theta = params_to_vector(params)
        report.epoch_mse.append(mse_sum / count)
        log.info("epoch %d: train mse %.3e", epoch, report.epoch_mse[-1])
    if val:
        net = Network(params)
        noisy = np.stack([p[0] for p in val])
        clean = np.stack([p[1] for p in val])
        report.val_psnr = psnr(net.forward(noisy), clean)
        report.val_psnr_noisy = psnr(noisy, clean)
    return params, report
