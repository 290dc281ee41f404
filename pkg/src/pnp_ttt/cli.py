"""Command-line entry point: ``pnp-ttt {gen-data,train-prior,reconstruct,ttt,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, set_key
from .data import make_dataset
from .denoiser import init_params
from .experiment import (
    adapt_one,
    load_priors,
    make_test_images,
    manifest,
    reconstruct_one,
    run_sweep,
    summarize,
    write_json,
    write_rows,
)
from .io import FormatError, load_checkpoint, load_dataset, read_pgm, save_checkpoint, save_dataset, write_pgm
from .training import TrainingError, make_training_pairs, train_denoiser

log = logging.getLogger("pnp_ttt")


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", metavar="PATH", default=default, help="key = value config file")
    parser.add_argument("--seed", type=int, default=default, help="sets the data, mask, init and training seeds")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--threads", type=int, default=default, help="worker processes for sweeps")
    parser.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE", default=default, help="override a config key (repeatable)"
    )
    parser.add_argument("-v", "--verbose", action="count", default=default)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnp-ttt", description="PnP reconstruction with test-time training of the prior.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(p, None)
    # the same flags are accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write phantom and texture datasets")
    g.add_argument("--size", type=int, help="image side length (default: image_size)")
    g.add_argument("--count", type=int, default=40, help="images per kind")
    g.add_argument("--kinds", default="phantom,texture", help="comma-separated generator names")
    g.add_argument("--from-pgm", metavar="DIR", help="pack the *.pgm files of DIR instead of generating")
    g.add_argument("--export-pgm", action="store_true", help="also write every image as PGM")

    t = sub.add_parser("train-prior", parents=[common], help="train a denoiser on a dataset")
    t.add_argument("--data", required=True, help="dataset container")
    t.add_argument("--name", help="checkpoint name (default: dataset kind)")
    t.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")

    for name, helptext in (("reconstruct", "PnP reconstruction"), ("ttt", "PnP with test-time training")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True, help="prior checkpoint")
        s.add_argument("--data", help="ground-truth dataset (default: generated test images)")
        s.add_argument("--ratio", type=float, action="append", help="sampling ratio (repeatable; default: cs_ratios)")
        s.add_argument("--save-images", action="store_true", help="write reconstructions as a dataset container")
        s.add_argument("--export-pgm", action="store_true", help="also write reconstructions as PGM")
        if name == "reconstruct":
            s.add_argument("--label", choices=("natural", "matched"), default="matched", help="prior label in result rows")
        else:
            s.add_argument("--num-iter", type=int, help="shorthand for --set ttt.num_iter=N")
            s.add_argument("--lr", type=float, help="shorthand for --set ttt.lr=X")
            s.add_argument("--record-every", type=int, help="shorthand for --set ttt.record_every=N")
            s.add_argument("--save-adapted", action="store_true", help="write each adapted prior as a checkpoint")

    sub.add_parser("sweep", parents=[common], help="natural, matched and PnP-TTT over all ratios and images")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = set_key(cfg, key, value)
    shorthands = {
        "epochs": "train.epochs",
        "num_iter": "ttt.num_iter",
        "lr": "ttt.lr",
        "record_every": "ttt.record_every",
    }
    for attr, key in shorthands.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg = set_key(cfg, key, v)
    if args.seed is not None:
        for key in ("data_seed", "mask_seed", "init_seed", "train.seed"):
            cfg = set_key(cfg, key, args.seed)
    if args.out is not None:
        cfg = set_key(cfg, "out_dir", args.out)
    return cfg


def _ratio_tag(r: float) -> str:
    return f"{r:g}".replace(".", "p")


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    size = args.size or cfg.image_size
    files = {}
    if args.from_pgm:
        paths = sorted(Path(args.from_pgm).glob("*.pgm"))
        images = [read_pgm(p) for p in paths]
        sets = {"imported": (images, {"kind": "imported", "sources": [p.name for p in paths]})}
    else:
        if args.count < 0:
            raise ConfigError("--count must be >= 0")
        sets = {}
        for kind in [k.strip() for k in args.kinds.split(",") if k.strip()]:
            try:
                images = make_dataset(kind, size, args.count, cfg.data_seed)
            except KeyError:
                raise ConfigError(f"unknown dataset kind {kind!r}") from None
            sets[kind] = (images, {"kind": kind, "size": size, "count": args.count, "seed": cfg.data_seed})
    for name, (images, meta) in sets.items():
        path = save_dataset(out / f"{name}.pnpd", images, meta, shape=(size, size))
        files[name] = {"file": path.name, "count": len(images)}
        if args.export_pgm:
            for i, im in enumerate(images):
                write_pgm(out / name / f"{i:04d}.pgm", im)
        print(f"wrote {len(images)} images to {path}")
    write_json(out / "manifest.json", manifest(cfg, "gen-data", {"datasets": files}))
    return 0


def cmd_train_prior(args, cfg: ExperimentConfig) -> int:
    images, meta = load_dataset(args.data)
    name = args.name or meta.get("kind", "prior")
    params = init_params(cfg.denoiser, cfg.init_seed)
    pairs = make_training_pairs(images, cfg.train)
    if not pairs and cfg.train.epochs > 0:
        raise ConfigError(f"{args.data}: no image is large enough for patch_size {cfg.train.patch_size}")
    trained, rep = train_denoiser(params, pairs, cfg.train)
    info = {"data": str(args.data), "data_meta": meta, "epochs": cfg.train.epochs, "val_psnr": rep.val_psnr, "val_psnr_noisy": rep.val_psnr_noisy}
    path = save_checkpoint(Path(cfg.out_dir) / f"{name}.ckpt", trained, info)
    write_json(Path(cfg.out_dir) / f"{name}.manifest.json", manifest(cfg, "train-prior", {"checkpoint": path.name, "training": info}))
    print(f"wrote {path}")
    print(f"validation PSNR {rep.val_psnr:.2f} dB (noisy input {rep.val_psnr_noisy:.2f} dB)")
    return 0


def _images_for(args, cfg):
    if args.data:
        return load_dataset(args.data)[0]
    return make_test_images(cfg)


def cmd_reconstruct(args, cfg: ExperimentConfig) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    images = _images_for(args, cfg)
    out = Path(cfg.out_dir)
    rows = []
    for ratio in args.ratio or cfg.cs_ratios:
        recons = []
        for i, x in enumerate(images):
            row, xb = reconstruct_one(x, ratio, i, params, args.label, cfg)
            rows.append(row)
            recons.append(xb if xb is not None else x * float("nan"))
            if args.export_pgm and xb is not None:
                write_pgm(out / f"recon_{_ratio_tag(ratio)}" / f"{i:04d}.pgm", xb)
        if args.save_images:
            save_dataset(out / f"recon_{_ratio_tag(ratio)}.pnpd", recons, {"kind": "reconstruction", "cs_ratio": ratio})
    write_rows(out / "results.csv", rows)
    write_json(out / "manifest.json", manifest(cfg, "reconstruct", {"checkpoint": str(args.checkpoint)}))
    for r in rows:
        print(f"{r.prior} ratio {r.cs_ratio:g} image {r.image_id}: {r.psnr_db:.2f} dB, SSIM {r.ssim:.4f} [{r.status}]")
    return 0


def cmd_ttt(args, cfg: ExperimentConfig) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    images = _images_for(args, cfg)
    out = Path(cfg.out_dir)
    trace, best = [], []
    for ratio in args.ratio or cfg.cs_ratios:
        recons = []
        for i, x in enumerate(images):
            res = adapt_one(x, ratio, i, params, cfg)
            trace += res.trace
            best.append(res.best)
            recons.append(res.image if res.image is not None else x * float("nan"))
            if args.save_adapted and res.params is not None:
                save_checkpoint(out / "adapted" / f"r{_ratio_tag(ratio)}_img{i:04d}.ckpt", res.params)
            if args.export_pgm and res.image is not None:
                write_pgm(out / f"ttt_{_ratio_tag(ratio)}" / f"{i:04d}.pgm", res.image)
            b = res.best
            print(f"ratio {ratio:g} image {i}: iteration 0 {res.trace[0].psnr_db:.2f} dB, best {b.psnr_db:.2f} dB at iteration {b.ttt_iter} [{b.status}]")
        if args.save_images:
            save_dataset(out / f"ttt_{_ratio_tag(ratio)}.pnpd", recons, {"kind": "ttt_best", "cs_ratio": ratio})
    write_rows(out / "trace.csv", trace)
    write_rows(out / "results.csv", best)
    write_json(out / "manifest.json", manifest(cfg, "ttt", {"checkpoint": str(args.checkpoint)}))
    return 0


def format_summary(summary: dict) -> str:
    ratios = summary["ratios"]
    table = summary["table"]
    head = "prior".ljust(20) + "".join(f"{r:>9g}" for r in ratios)
    lines = [head]
    for label in ("natural", "matched", "pnp_ttt", "pnp_ttt_fixed_iter", "delta"):
        vals = [table[label][repr(float(r))]["psnr_db"] for r in ratios]
        lines.append(label.ljust(20) + "".join(f"{v:9.2f}" for v in vals))
    return "\n".join(lines)


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    natural, matched = load_priors(cfg)
    rows = run_sweep(cfg, natural, matched, workers=args.threads or 1)
    out = Path(cfg.out_dir)
    write_rows(out / "results.csv", rows)
    summary = summarize(rows, cfg.cs_ratios)
    write_json(out / "summary.json", summary)
    write_json(out / "manifest.json", manifest(cfg, "sweep"))
    print(format_summary(summary))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-prior": cmd_train_prior,
    "reconstruct": cmd_reconstruct,
    "ttt": cmd_ttt,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose or 0, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FormatError, TrainingError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
