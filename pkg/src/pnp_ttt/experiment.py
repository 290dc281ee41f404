"""Reconstruction, adaptation and sweep runs that produce result rows and summaries."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .data import make_dataset
from .deq import DeqBackwardConfig, loss_selfsup
from .denoiser import DenoiserParams
from .fixed_point import DivergenceError, run_pnp
from .forward import MeasurementOp, mask_for_ratio, simulate_measurement
from .io import load_checkpoint
from .metrics import psnr, ssim
from .ttt import TTTError, best_iterate, ttt_adapt

log = logging.getLogger(__name__)

PRIOR_LABELS = ("natural", "matched", "pnp_ttt")
NO_TTT = -1


@dataclass
class ResultRow:
    experiment_id: str
    prior: str
    cs_ratio: float
    image_id: int
    ttt_iter: int
    loss: float
    psnr_db: float
    ssim: float
    wall_time_s: float | None = None
    status: str = "ok"

    def __post_init__(self):
        if self.prior not in PRIOR_LABELS:
            raise ValueError(f"prior label must be one of {PRIOR_LABELS}, got {self.prior!r}")

    def sort_key(self):
        return (self.cs_ratio, self.image_id, PRIOR_LABELS.index(self.prior), self.ttt_iter)


FIELDS = [f.name for f in dataclasses.fields(ResultRow)]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        # shortest round-trip repr keeps files exact and reproducible
        return repr(v)
    return str(v)


def write_rows(path, rows: list[ResultRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(FIELDS)
        for r in rows:
            w.writerow([_cell(getattr(r, f)) for f in FIELDS])
    return path


def read_rows(path) -> list[ResultRow]:
    with Path(path).open(newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        out = []
        for d in rd:
            out.append(
                ResultRow(
                    d["experiment_id"],
                    d["prior"],
                    float(d["cs_ratio"]),
                    int(d["image_id"]),
                    int(d["ttt_iter"]),
                    float(d["loss"]),
                    float(d["psnr_db"]),
                    float(d["ssim"]),
                    float(d["wall_time_s"]) if d["wall_time_s"] else None,
                    d["status"],
                )
            )
    return out


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


# -- single measurements ---------------------------------------------------------


def measurement_for(x: np.ndarray, ratio: float, image_id: int, cfg: ExperimentConfig):
    op = MeasurementOp(mask_for_ratio(x.shape[0], ratio, cfg.mask_seed), cfg.measurement_noise)
    noise_seed = int(np.random.SeedSequence([cfg.data_seed, image_id, round(ratio * 1e6)]).generate_state(1)[0])
    return op, simulate_measurement(x, op, noise_seed)


def _check_shape(params: DenoiserParams, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ConfigError(f"images must be square, got {x.shape}")
    if x.shape[0] < params.config.kernel_size:
        raise ConfigError(f"image size {x.shape[0]} is smaller than the denoiser kernel")


def reconstruct_one(x, ratio, image_id, params, label, cfg: ExperimentConfig) -> tuple[ResultRow, np.ndarray | None]:
    """PnP reconstruction of one simulated measurement; failed solves give a NaN row."""
    _check_shape(params, x)
    op, y = measurement_for(x, ratio, image_id, cfg)
    t0 = time.perf_counter()
    try:
        res = run_pnp(None, y, op, params, cfg.pnp)
    except DivergenceError as e:
        log.warning("%s prior diverged on image %d at ratio %g: %s", label, image_id, ratio, e)
        nan = float("nan")
        return ResultRow(cfg.experiment_id, label, ratio, image_id, NO_TTT, nan, nan, nan, None, "failed"), None
    wall = time.perf_counter() - t0 if cfg.record_time else None
    xb = res.x_bar
    loss = loss_selfsup(xb, y, op, params, cfg.pnp.gamma, cfg.ttt.loss)
    return ResultRow(cfg.experiment_id, label, ratio, image_id, NO_TTT, loss, psnr(xb, x), ssim(xb, x), wall), xb


@dataclass
class TTTOutcome:
    trace: list[ResultRow]
    best: ResultRow
    params: DenoiserParams | None
    image: np.ndarray | None


def adapt_one(x, ratio, image_id, params, cfg: ExperimentConfig) -> TTTOutcome:
    """TTT on one simulated measurement: every recorded iterate plus the best one.

    After a divergence the iterates recorded so far are kept and a ``failed`` row
    marks the iteration that broke.
    """
    _check_shape(params, x)
    op, y = measurement_for(x, ratio, image_id, cfg)
    deq_cfg = DeqBackwardConfig(cfg.anderson)
    failed_at = None
    try:
        res = ttt_adapt(None, y, op, params, cfg.pnp, deq_cfg, cfg.ttt, ground_truth=x)
    except TTTError as e:
        log.warning("TTT failed on image %d at ratio %g: %s", image_id, ratio, e)
        res, failed_at = e.result, e.iteration

    def row(rec, status="ok"):
        wall = rec.elapsed_s if cfg.record_time else None
        return ResultRow(cfg.experiment_id, "pnp_ttt", ratio, image_id, rec.index, rec.loss, rec.psnr, rec.ssim, wall, status)

    trace = [row(r) for r in res.trace]
    nan = float("nan")
    if failed_at is not None:
        trace.append(ResultRow(cfg.experiment_id, "pnp_ttt", ratio, image_id, failed_at, nan, nan, nan, None, "failed"))
    if not res.trace.records:
        return TTTOutcome(trace, trace[-1], None, None)
    k, img = best_iterate(res.trace, res.iterates)
    return TTTOutcome(trace, row(res.trace.records[k]), res.params if failed_at is None else None, img)


# -- sweeps ----------------------------------------------------------------------


def load_priors(cfg: ExperimentConfig) -> tuple[DenoiserParams, DenoiserParams]:
    """Mismatched (natural) and matched priors named by the config."""
    missing = []
    for key in ("mismatched_checkpoint", "matched_checkpoint"):
        p = getattr(cfg, key)
        if not p or not Path(p).is_file():
            missing.append(f"{key}={p or '<unset>'}")
    if missing:
        raise ConfigError("missing checkpoints: " + ", ".join(missing))
    return load_checkpoint(cfg.mismatched_checkpoint)[0], load_checkpoint(cfg.matched_checkpoint)[0]


def make_test_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    return make_dataset(cfg.test_kind, cfg.image_size, cfg.num_test_images, cfg.data_seed)


def _sweep_item(args) -> list[ResultRow]:
    cfg, natural, matched, ratio, image_id, x = args
    rows = [
        reconstruct_one(x, ratio, image_id, natural, "natural", cfg)[0],
        reconstruct_one(x, ratio, image_id, matched, "matched", cfg)[0],
    ]
    rows += adapt_one(x, ratio, image_id, natural, cfg).trace
    log.info("ratio %g image %d done", ratio, image_id)
    return rows


def run_sweep(cfg: ExperimentConfig, natural: DenoiserParams, matched: DenoiserParams, workers: int = 1) -> list[ResultRow]:
    """Natural, matched and PnP-TTT results for every (ratio, image), sorted."""
    images = make_test_images(cfg)
    items = [(cfg, natural, matched, r, i, x) for r in cfg.cs_ratios for i, x in enumerate(images)]
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_item, items))
    else:
        chunks = [_sweep_item(it) for it in items]
    return sorted((r for c in chunks for r in c), key=ResultRow.sort_key)


def _mean(vals):
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _ok(rows):
    return [r for r in rows if r.status == "ok" and math.isfinite(r.psnr_db)]


def per_image_best(rows: list[ResultRow]) -> dict[tuple[float, int], ResultRow]:
    """Highest-PSNR pnp_ttt row per (ratio, image); the earliest iteration wins ties."""
    best: dict[tuple[float, int], ResultRow] = {}
    for r in _ok(rows):
        if r.prior != "pnp_ttt":
            continue
        key = (r.cs_ratio, r.image_id)
        cur = best.get(key)
        if cur is None or r.psnr_db > cur.psnr_db or (r.psnr_db == cur.psnr_db and r.ttt_iter < cur.ttt_iter):
            best[key] = r
    return best


def summarize(rows: list[ResultRow], ratios: list[float]) -> dict:
    """Mean PSNR/SSIM per prior and ratio, both TTT aggregates, and the delta row.

    ``pnp_ttt`` uses each image's best iterate.  ``pnp_ttt_fixed_iter`` uses one
    iteration per ratio, the one with the highest mean PSNR over images that
    completed it.  ``delta`` is ``pnp_ttt - natural`` on the emitted means.
    """
    ok = _ok(rows)
    best = per_image_best(rows)
    table: dict[str, dict[str, dict]] = {k: {} for k in ("natural", "matched", "pnp_ttt", "pnp_ttt_fixed_iter", "delta")}
    failed = sum(r.status != "ok" for r in rows)
    for ratio in ratios:
        key = repr(float(ratio))
        for label in ("natural", "matched"):
            sel = [r for r in ok if r.prior == label and r.cs_ratio == ratio]
            table[label][key] = {"psnr_db": _mean(r.psnr_db for r in sel), "ssim": _mean(r.ssim for r in sel), "n": len(sel)}
        sel = [r for (rt, _), r in sorted(best.items()) if rt == ratio]
        table["pnp_ttt"][key] = {
            "psnr_db": _mean(r.psnr_db for r in sel),
            "ssim": _mean(r.ssim for r in sel),
            "n": len(sel),
            "best_iters": [r.ttt_iter for r in sel],
        }
        by_iter: dict[int, list[ResultRow]] = {}
        for r in ok:
            if r.prior == "pnp_ttt" and r.cs_ratio == ratio:
                by_iter.setdefault(r.ttt_iter, []).append(r)
        fixed = {"iteration": None, "psnr_db": float("nan"), "ssim": float("nan"), "n": 0}
        for it in sorted(by_iter):
            m = _mean(r.psnr_db for r in by_iter[it])
            if fixed["iteration"] is None or m > fixed["psnr_db"]:
                fixed = {"iteration": it, "psnr_db": m, "ssim": _mean(r.ssim for r in by_iter[it]), "n": len(by_iter[it])}
        table["pnp_ttt_fixed_iter"][key] = fixed
        nat, ttt = table["natural"][key], table["pnp_ttt"][key]
        table["delta"][key] = {"psnr_db": ttt["psnr_db"] - nat["psnr_db"], "ssim": ttt["ssim"] - nat["ssim"]}
    return {"ratios": [float(r) for r in ratios], "table": table, "failed_rows": failed}


def manifest(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> dict:
    out = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"data": cfg.data_seed, "mask": cfg.mask_seed, "init": cfg.init_seed},
    }
    if extra:
        out.update(extra)
    return out
