"""Command line entry point: ``olchdr <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (bad data, divergence),
2 invalid configuration or usage, 3 checkpoint / architecture mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .autoencoder import TrainingDiverged, codebook_usage, load_olc_checkpoint, train_olc
from .checkpoint import CheckpointError, read_manifest
from .config import ConfigError, RunConfig, load_config, write_resolved
from .datasets import SceneLoadError, load_dataset, load_scene, synth_dataset, write_dataset
from .hdrio import write_hdr
from .hdrnet.train import evaluate, infer, load_hdr_checkpoint, load_prior, train_hdr
from .radiometry import tonemap

log = logging.getLogger("olchdr")

REPORT_SCHEMA = "olchdr-eval/1"
CODEBOOK_SCHEMA = "olchdr-codebook/1"
METRIC_KEYS = ("psnr_mu", "psnr_l", "ssim_mu", "ssim_l")


def _render(value: float):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return round(float(value), 6)


def report_lines(rows: list[dict]) -> list[str]:
    """One JSON object per scene followed by the mean row."""
    lines = []
    for row in rows:
        obj = {"schema": REPORT_SCHEMA, "scene": row["scene"]}
        obj.update({k: _render(row[k]) for k in METRIC_KEYS})
        lines.append(json.dumps(obj))
    mean = {"schema": REPORT_SCHEMA, "scene": "mean", "count": len(rows)}
    for k in METRIC_KEYS:
        mean[k] = _render(float(np.mean([r[k] for r in rows]))) if rows else None
    lines.append(json.dumps(mean))
    return lines


def _scenes(cfg: RunConfig, data: str | None):
    path = data or cfg.data
    if path:
        return load_dataset(path)
    return synth_dataset(cfg.synth, cfg.scenes, cfg.seed)


def _history_writer(path: str):
    fh = open(path, "w")

    def callback(step, record):
        fh.write(json.dumps(record) + "\n")

    return fh, callback


def _device_model(model, device: str | None):
    return model.to(torch.device(device)) if device else model


# -- subcommands ------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    scenes = synth_dataset(cfg.synth, args.count or cfg.scenes, cfg.seed)
    paths = write_dataset(scenes, args.out)
    write_resolved(cfg, args.out)
    log.info("wrote %d scenes to %s", len(paths), args.out)
    return 0


def cmd_train_olc(args, cfg: RunConfig) -> int:
    scenes = _scenes(cfg, args.data)
    out = os.path.join(cfg.out_dir, "olc")
    write_resolved(cfg, out)
    fh, callback = _history_writer(os.path.join(out, "history.jsonl"))
    with fh:
        run = train_olc(cfg.olc, scenes, out_dir=out, callback=callback)
    print(run.checkpoint)
    return 0


def cmd_train_hdr(args, cfg: RunConfig) -> int:
    scenes = _scenes(cfg, args.data)
    # validate the Step-1 checkpoint before touching an existing output dir
    prior = load_prior(args.step1)[0] if cfg.hdr.use_vq_decoder else None
    out = os.path.join(cfg.out_dir, "hdr")
    write_resolved(cfg, out)
    fh, callback = _history_writer(os.path.join(out, "history.jsonl"))
    with fh:
        run = train_hdr(cfg.hdr, scenes, args.step1, out_dir=out, prior=prior, callback=callback)
    print(run.checkpoint)
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    model, hdr_cfg, _ = load_hdr_checkpoint(args.ckpt)
    model = _device_model(model, args.device)
    scene = load_scene(args.scene)
    pred = np.clip(infer(model, scene, hdr_cfg.gamma, args.tile), 0.0, 1.0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_hdr(out, pred)
    preview = out.with_suffix(".png")
    from PIL import Image

    Image.fromarray(np.round(tonemap(pred, hdr_cfg.mu) * 255).astype(np.uint8)).save(preview)
    log.info("wrote %s and %s", out, preview)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, hdr_cfg, _ = load_hdr_checkpoint(args.ckpt)
    model = _device_model(model, args.device)
    scenes = load_dataset(args.data)
    if not any(s.ground_truth is not None for s in scenes):
        raise SceneLoadError(f"{args.data}: no scene has ground truth to evaluate against")
    rows = evaluate(model, scenes, hdr_cfg.gamma, hdr_cfg.mu, args.tile)
    lines = report_lines(rows)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    with open(args.report, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if not args.quiet:
        print(lines[-1])
    return 0


def cmd_inspect_codebook(args, cfg: RunConfig) -> int:
    kind = read_manifest(args.ckpt).get("kind")
    if kind != "olc":
        raise CheckpointError(f"{args.ckpt}: inspect-codebook needs a Step-1 (olc) checkpoint, got {kind!r}")
    model, olc_cfg, _ = load_olc_checkpoint(args.ckpt)
    model = _device_model(model, args.device)
    usage = codebook_usage(model, load_dataset(args.data), olc_cfg.gamma)
    report = {"schema": CODEBOOK_SCHEMA, "checkpoint": os.path.abspath(args.ckpt),
              "overlapped": olc_cfg.overlapped, **usage}
    report["per_eta"] = {str(k): v for k, v in usage["per_eta"].items()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1)
    if not args.quiet:
        print(json.dumps({"full_used": usage["full"]["used"],
                          **{f"eta{k}_used": v["used"] for k, v in usage["per_eta"].items()}}))
    return 0


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    common.add_argument("--out-dir", default=None, help="override the config out_dir")

    parser = argparse.ArgumentParser(prog="olchdr",
                                     description="HDR reconstruction with an overlapped-codebook prior.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-olc", parents=[common], help="Step 1: train the VQGAN with the overlapped codebook")
    p.add_argument("--config")
    p.add_argument("--data", default=None, help="scene directory (default: config `data` or synthetic)")
    p.set_defaults(func=cmd_train_olc)

    p = sub.add_parser("train-hdr", parents=[common], help="Step 2: train the HDR network")
    p.add_argument("--config")
    p.add_argument("--step1", required=True, help="Step-1 checkpoint directory")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_train_hdr)

    p = sub.add_parser("infer", parents=[common], help="reconstruct one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output .hdr path; a .png preview is written next to it")
    p.add_argument("--tile", type=int, default=256)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-codebook", parents=[common], help="code usage histograms")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_codebook)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(getattr(args, "config", None),
                          {"seed": args.seed, "device": args.device, "quiet": args.quiet or None,
                           "out_dir": args.out_dir})
        torch.set_num_threads(cfg.threads)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"olchdr: config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"olchdr: checkpoint error: {exc}", file=sys.stderr)
        return 3
    except (SceneLoadError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"olchdr: error: {str(exc).splitlines()[0]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
