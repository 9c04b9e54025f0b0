"""Command line entry point: ``latentflow <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Environment: ``LATENTFLOW_DEBUG=1`` turns on finite-value and cache checks;
``LATENTFLOW_DETERMINISTIC=0`` lets BLAS use more than one thread.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from latentflow.config import ModelConfig
from latentflow.errors import ConfigError, LatentFlowError

log = logging.getLogger("latentflow")


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"size must look like HxW, got {text!r}") from exc
    return h, w


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. model.num_iters=2 (repeatable)")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentflow", description="Latent cost-volume optical flow")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic image pairs with .flo ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", default="96x96")
    p.add_argument("--motion", default="smooth", choices=["constant", "affine", "smooth"])
    p.add_argument("--max-magnitude", type=float, default=8.0)
    _common(p, config=False)

    p = sub.add_parser("pretrain", help="MCVA pretraining with frozen encoders")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="directory written by `synth` (default: generate from config)")
    p.add_argument("--log", help="CSV metrics log path")
    p.add_argument("--dump-masks", help="directory for PGM dumps of one mask pyramid")

    p = sub.add_parser("train", help="supervised training")
    _common(p)
    p.add_argument("--init", help="checkpoint to initialize from (e.g. an MCVA checkpoint)")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="directory written by `synth` (default: generate from config)")
    p.add_argument("--log", help="CSV metrics log path")

    p = sub.add_parser("eval", help="print AEPE and F1-all as a CSV row")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--combine-mode", default="or", choices=["or", "and"])

    for name in ("infer", "tile-infer"):
        p = sub.add_parser(name, help="predict flow for one image pair")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--img1", required=True)
        p.add_argument("--img2", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--train-size", required=(name == "tile-infer"), help="tile size HxW")
        if name == "infer":
            p.add_argument("--tile", action="store_true", help="Gaussian-tile inference (needs --train-size)")

    p = sub.add_parser("gradcheck", help="run finite-difference gradient suites")
    p.add_argument("--module", action="append", default=None,
                   help="suite name (ndtensor, costvolume, costencoder, decoder, mcva, model); repeatable")
    _common(p, config=False)
    return ap


# -- helpers -----------------------------------------------------------------------------

def _log_config(cfg: dict) -> None:
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))


def _dataset(args, cfg: dict) -> list:
    from latentflow.harness.dataset import read_dataset
    from latentflow.harness.synthetic import synth_dataset

    if getattr(args, "data", None):
        return read_dataset(args.data)
    d = cfg["data"]
    h, w = d["size"]
    return synth_dataset(int(d["n"]), int(h), int(w), int(d.get("seed", cfg["seed"])), d.get("motion", "smooth"),
                         float(d.get("max_magnitude", 8.0)))


def _load_model(path):
    from latentflow.harness.checkpoint import load_checkpoint, load_into
    from latentflow.model import FlowModel

    ckpt = load_checkpoint(path)
    model = FlowModel(ModelConfig.from_dict(ckpt.config))
    report = load_into(model, ckpt)
    if report.missing:
        raise ConfigError(f"checkpoint {path} lacks parameters: {report.missing[:5]}")
    return model


# -- commands ------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from latentflow.harness.dataset import write_dataset
    from latentflow.harness.synthetic import synth_pair

    h, w = parse_size(args.size)
    seed = 0 if args.seed is None else args.seed
    samples = [synth_pair(h, w, np.random.default_rng([seed, i]), args.motion, args.max_magnitude)
               for i in range(args.n)]
    paths = write_dataset(args.out, samples)
    print(f"wrote {len(paths)} samples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from latentflow.harness.checkpoint import save_checkpoint
    from latentflow.harness.runconfig import load_run_config, model_config, pretrain_config
    from latentflow.harness.train import pretrain
    from latentflow.mcva import generate_block_masks, dump_masks, pretrained_state
    from latentflow.model import FlowModel

    cfg = load_run_config(args.config, args.overrides, args.seed)
    cfg["model"].setdefault("freeze_image_encoder", True)
    cfg["model"].setdefault("freeze_context_encoder", cfg["mcva"].get("freeze_context_encoder", True))
    _log_config(cfg)
    mcfg = model_config(cfg)
    if not mcfg.freeze_image_encoder:
        raise ConfigError("pretrain refuses freeze_image_encoder=false: updating the image encoder "
                          "during masked cost-volume pretraining makes training diverge")
    pcfg = pretrain_config(cfg)
    model = FlowModel(mcfg)
    data = _dataset(args, cfg)
    if args.dump_masks:
        cv0, _ = model.encode(data[0].image1, data[0].image2)
        m = generate_block_masks(*cv0.grid, pcfg.mcva.ratio, pcfg.mcva.block_range,
                                 np.random.default_rng(pcfg.seed), pcfg.mcva.mode)
        dump_masks(m, args.dump_masks)
    train_log, head = pretrain(model, data, pcfg)
    if args.log:
        train_log.write_csv(args.log)
    save_checkpoint(args.out, pretrained_state(model, head), model.cfg.to_dict(), kind="pretrain")
    print(f"pretext loss {train_log.rows[0]['loss']:.4f} -> {train_log.rows[-1]['loss']:.4f}; saved {args.out}")
    return 0


def cmd_train(args) -> int:
    from latentflow.harness.checkpoint import load_checkpoint, load_into, save_model
    from latentflow.harness.runconfig import load_run_config, model_config, train_config
    from latentflow.harness.train import train_supervised
    from latentflow.model import FlowModel

    cfg = load_run_config(args.config, args.overrides, args.seed)
    _log_config(cfg)
    model = FlowModel(model_config(cfg))
    if args.init:
        report = load_into(model, load_checkpoint(args.init))
        if report.unexpected:
            log.info("init: ignored unmatched layers %s", report.unmatched_layers)
        if report.missing:
            log.info("init: %d parameters kept at their fresh values", len(report.missing))
    train_log = train_supervised(model, _dataset(args, cfg), train_config(cfg))
    if args.log:
        train_log.write_csv(args.log)
    save_model(args.out, model)
    last = train_log.rows[-1]
    print(f"final step {last['step']}: loss {last['loss']:.4f} aepe {last['aepe']:.4f}; saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    from latentflow.harness.dataset import read_dataset
    from latentflow.harness.metrics import aepe, f1_all
    from latentflow.ndtensor import no_grad

    model = _load_model(args.ckpt)
    samples = read_dataset(args.data)
    if not samples:
        raise ConfigError(f"no samples found in {args.data}")
    errs, f1s = [], []
    with no_grad():
        for s in samples:
            final = model(s.image1, s.image2, num_iters=args.iters).final.data
            errs.append(aepe(final, s.flow, s.valid))
            f1s.append(f1_all(final, s.flow, s.valid, args.combine_mode))
    print("aepe,f1_all")
    print(f"{np.mean(errs):.6f},{np.mean(f1s):.6f}")
    return 0


def cmd_infer(args, tiled: bool) -> int:
    from latentflow.harness.flo import write_flo
    from latentflow.harness.images import load_png
    from latentflow.ndtensor import no_grad
    from latentflow.tiling import tile_infer

    model = _load_model(args.ckpt)
    img1, img2 = load_png(args.img1), load_png(args.img2)
    if tiled:
        if not args.train_size:
            raise ConfigError("tiled inference needs --train-size HxW")
        flow = tile_infer(model, img1, img2, parse_size(args.train_size), args.iters)
    else:
        with no_grad():
            flow = model(img1, img2, num_iters=args.iters).final.data
    write_flo(args.out, flow)
    print(f"wrote {args.out} ({flow.shape[2]}x{flow.shape[1]})")
    return 0


def cmd_gradcheck(args) -> int:
    from latentflow.gradsuites import run_suites

    results = run_suites(args.module, seed=args.seed or 0, report=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 0 if not failed else 1


def _configure_runtime() -> None:
    if os.environ.get("LATENTFLOW_DETERMINISTIC", "1") not in ("0", "false", "False"):
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _configure_runtime()
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "pretrain":
            return cmd_pretrain(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "infer":
            return cmd_infer(args, tiled=args.tile)
        if args.command == "tile-infer":
            return cmd_infer(args, tiled=True)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (LatentFlowError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
