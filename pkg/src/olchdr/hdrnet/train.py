"""Step-2 losses, training loop, checkpoints and (tiled) inference."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .. import checkpoint as ckpt
from ..autoencoder import (DOWNSAMPLE, PerceptualExtractor, TrainingDiverged, load_olc_checkpoint,
                           perceptual_distance, to_image, to_tensor)
from ..codebook import NonFiniteFeatures
from ..datasets import Example, Scene, augment, patchify
from ..layers import mu_law
from ..radiometry import DEFAULT_GAMMA, DEFAULT_MU, hdr_metrics, psnr_mu
from .model import ABLATIONS, HdrArch, HdrModel, VqPrior, build_inputs, inputs_to_tensor

log = logging.getLogger(__name__)


@dataclass
class HdrTrainConfig:
    base_channels: int = 32
    use_pa: bool = True
    merge: str = "fsm"
    use_vq_decoder: bool = True
    use_rf: bool = True
    shared_encoders: bool = False
    deform_groups: int = 8
    ablation: str | None = None
    lambda_per: float = 0.1
    lambda_map: float = 0.5
    lr: float = 1e-4
    mu: float = DEFAULT_MU
    gamma: float = DEFAULT_GAMMA
    patch_size: int = 256
    stride: int = 64
    batch_size: int = 4
    steps: int = 10000
    seed: int = 0
    augment: bool = True
    perceptual: str = "random"
    perceptual_weights: str | None = None
    checkpoint_every: int = 0
    log_every: int = 100
    device: str = "cpu"

    def __post_init__(self):
        if self.ablation is not None:
            if self.ablation not in ABLATIONS:
                raise ValueError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")
            for k, v in ABLATIONS[self.ablation].items():
                setattr(self, k, v)
        if self.lambda_per < 0 or self.lambda_map < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.patch_size % DOWNSAMPLE:
            raise ValueError(f"patch_size must be divisible by {DOWNSAMPLE}")
        self.arch()

    def arch(self) -> HdrArch:
        return HdrArch(self.base_channels, self.use_pa, self.merge, self.use_vq_decoder, self.use_rf,
                       self.shared_encoders, self.deform_groups, self.mu)


@dataclass
class HdrLosses:
    rec: torch.Tensor
    per: torch.Tensor
    map: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "per", "map", "total")}


def mapping_loss(z_vq: torch.Tensor, z_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared distance to the ground-truth code; no gradient to ``z_gt``."""
    return torch.mean((z_vq - z_gt.detach()) ** 2)


def hdr_losses(pred: torch.Tensor, gt: torch.Tensor, z_vq: torch.Tensor | None = None,
               z_gt: torch.Tensor | None = None, phi=None, lambda_per: float = 0.1,
               lambda_map: float = 0.5, mu: float = DEFAULT_MU) -> HdrLosses:
    t_gt = mu_law(gt.clamp(0.0, 1.0), mu)
    t_pred = mu_law(pred.clamp(0.0, 1.0), mu)
    rec = torch.mean(torch.abs(t_gt - t_pred))
    per = perceptual_distance(phi, t_gt, t_pred)
    lmap = mapping_loss(z_vq, z_gt) if z_vq is not None and z_gt is not None else rec.new_zeros(())
    return HdrLosses(rec, per, lmap, rec + lambda_per * per + lambda_map * lmap)


@dataclass
class HdrRun:
    model: HdrModel
    config: HdrTrainConfig
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None


def load_prior(step1_checkpoint: str) -> tuple[VqPrior, dict]:
    vq, olc_cfg, manifest = load_olc_checkpoint(step1_checkpoint)
    return VqPrior(vq.encoder, vq.codebook, vq.decoder), manifest


def build_model(cfg: HdrTrainConfig, prior: VqPrior | None) -> HdrModel:
    torch.manual_seed(cfg.seed)
    return HdrModel(cfg.arch(), prior)


def _batch(examples: Sequence[Example], rng: np.random.Generator, cfg: HdrTrainConfig):
    idx = rng.integers(len(examples), size=cfg.batch_size)
    ins, gts = [], []
    for i in idx:
        ex = augment(examples[i], rng) if cfg.augment else examples[i]
        ins.append(build_inputs(ex.ldr, ex.times, cfg.gamma))
        gts.append(ex.hdr)
    return inputs_to_tensor(ins), to_tensor(gts)


def save_hdr_checkpoint(path, run: HdrRun, step: int, metrics=None, step1: str | None = None) -> str:
    conf = asdict(run.config)
    conf["downsample"] = DOWNSAMPLE
    if run.model.prior is not None:
        conf["code_dim"] = run.model.prior.code_dim
        conf["num_codes"] = run.model.prior.codebook.num_codes
        conf["prior_base_channels"] = run.model.prior.decoder.widths[0]
    if step1:
        conf["step1_checkpoint"] = os.path.abspath(step1)
    codebook = run.model.prior.codebook if run.model.prior is not None else None
    return ckpt.save_checkpoint(path, "hdr", conf, step, run.config.seed, {"hdrnet": run.model},
                                codebook=codebook, metrics=metrics)


def load_hdr_checkpoint(path) -> tuple[HdrModel, HdrTrainConfig, dict]:
    from ..autoencoder import VqDecoder, VqEncoder
    from ..codebook import OverlappedCodebook

    manifest = ckpt.read_manifest(path)
    if manifest.get("kind") != "hdr":
        raise ckpt.CheckpointError(f"{path}: expected a Step-2 (hdr) checkpoint, got {manifest.get('kind')!r}")
    conf = dict(manifest["config"])
    if conf.pop("downsample", DOWNSAMPLE) != DOWNSAMPLE:
        raise ckpt.CheckpointError(f"{path}: downsample factor differs from {DOWNSAMPLE}")
    extra = {k: conf.pop(k) for k in ("code_dim", "num_codes", "prior_base_channels", "step1_checkpoint")
             if k in conf}
    names = {f.name for f in fields(HdrTrainConfig)}
    conf.pop("ablation", None)
    cfg = HdrTrainConfig(**{k: v for k, v in conf.items() if k in names})
    prior = None
    if cfg.use_vq_decoder:
        n_z, k, base = extra["code_dim"], extra["num_codes"], extra["prior_base_channels"]
        prior = VqPrior(VqEncoder(n_z, base), OverlappedCodebook(k, n_z), VqDecoder(n_z, base, mu=cfg.mu))
    model = HdrModel(cfg.arch(), prior)
    try:
        model.load_state_dict(ckpt.load_state(path, "hdrnet"))
    except RuntimeError as exc:
        raise ckpt.CheckpointError(f"{path}: weights do not match architecture ({exc})") from exc
    return model, cfg, manifest


def _diverged(out_dir, step: int, record: dict):
    dump = {"step": step, "losses": record}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "divergence.json"), "w") as fh:
            json.dump(dump, fh, indent=2, default=str)
    raise TrainingDiverged(f"non-finite values at step {step}: {record}", dump)


def train_hdr(cfg: HdrTrainConfig, scenes: Sequence[Scene], step1_checkpoint: str | None = None,
              out_dir: str | None = None, prior: VqPrior | None = None,
              callback: Callable[[int, dict], None] | None = None) -> HdrRun:
    """Train encoders, PA, merging, fusing and the fidelity decoder; the Step-1
    decoder, codebook and encoder stay frozen."""
    if cfg.use_vq_decoder and prior is None:
        if step1_checkpoint is None:
            raise ckpt.CheckpointError("Step-2 training with the VQ decoder needs a Step-1 checkpoint")
        prior, _ = load_prior(step1_checkpoint)
    dev = torch.device(cfg.device)
    model = build_model(cfg, prior).to(dev)
    rng = np.random.default_rng(cfg.seed)
    examples = [ex for s in scenes for ex in patchify(s, cfg.patch_size, cfg.stride)]
    if not examples:
        raise ValueError("no training patches")
    if any(ex.hdr is None for ex in examples):
        raise ValueError("Step-2 training needs ground-truth HDR for every scene")
    phi = PerceptualExtractor(cfg.perceptual, cfg.perceptual_weights, cfg.seed).to(dev) \
        if cfg.perceptual != "none" and cfg.lambda_per > 0 else None
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr)
    run = HdrRun(model, cfg)

    t0 = time.perf_counter()
    model.train()
    for step in range(1, cfg.steps + 1):
        x, gt = _batch(examples, rng, cfg)
        x, gt = x.to(dev), gt.to(dev)
        try:
            pred, z_vq, _ = model(x)
        except NonFiniteFeatures as exc:
            _diverged(out_dir, step, {"error": str(exc)})
        z_gt = model.prior.ground_truth_code(gt) if z_vq is not None else None
        losses = hdr_losses(pred, gt, z_vq, z_gt, phi, cfg.lambda_per, cfg.lambda_map, cfg.mu)
        record = {"step": step, **losses.floats()}
        if not all(math.isfinite(v) for v in record.values()):
            _diverged(out_dir, step, record)
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        opt.step()
        run.history.append(record)
        if callback:
            callback(step, record)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("hdr step %d rec %.4f map %.4f (%.1fs)", step, record["rec"], record["map"],
                     time.perf_counter() - t0)
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_hdr_checkpoint(os.path.join(out_dir, "checkpoint"), run, step, step1=step1_checkpoint)
    if out_dir:
        run.checkpoint = save_hdr_checkpoint(os.path.join(out_dir, "checkpoint"), run, cfg.steps,
                                             {"final_rec": run.history[-1]["rec"]}, step1_checkpoint)
    return run


# -- inference --------------------------------------------------------------

def _blend_ramp(n: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    w = np.ones(n)
    ramp = (np.arange(overlap) + 0.5) / overlap
    if not at_start:
        w[:overlap] = ramp
    if not at_end:
        w[n - overlap:] = ramp[::-1]
    return w


def _tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    if size <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, size - tile, step)) + [size - tile]
    return sorted(set(starts))


def tiled_apply(fn: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray, tile: int = 256,
                overlap: int = 32) -> np.ndarray:
    """Apply ``fn`` (mapping (3, h, w, 6) -> (h, w, 3)) over overlapping tiles
    and blend with linear ramps in the overlaps."""
    _, h, w, _ = inputs.shape
    if tile % DOWNSAMPLE or overlap >= tile:
        raise ValueError("tile must be divisible by 8 and larger than the overlap")
    if h <= tile and w <= tile:
        return fn(inputs)
    ys, xs = _tile_starts(h, tile, overlap), _tile_starts(w, tile, overlap)
    out = np.zeros((h, w, 3))
    weight = np.zeros((h, w, 1))
    for y in ys:
        for x in xs:
            th, tw = min(tile, h), min(tile, w)
            pred = fn(inputs[:, y:y + th, x:x + tw])
            wy = _blend_ramp(th, min(overlap, th), y == 0, y + th >= h)
            wx = _blend_ramp(tw, min(overlap, tw), x == 0, x + tw >= w)
            wt = (wy[:, None] * wx[None, :])[..., None]
            out[y:y + th, x:x + tw] += wt * pred
            weight[y:y + th, x:x + tw] += wt
    return out / weight


@torch.no_grad()
def predict(model: HdrModel, inputs: np.ndarray) -> np.ndarray:
    model.eval()
    dev = next(model.parameters()).device
    pred, _, _ = model(inputs_to_tensor(inputs).to(dev))
    return to_image(pred)[0]


def infer(model: HdrModel, scene: Scene, gamma: float = DEFAULT_GAMMA, tile: int = 256,
          overlap: int = 32) -> np.ndarray:
    h, w = scene.stack.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"scene size {h}x{w} not divisible by {DOWNSAMPLE}")
    inputs = build_inputs(scene.stack.pixels(), scene.stack.times, gamma)
    return tiled_apply(lambda t: predict(model, t), inputs, tile, overlap)


def evaluate(model: HdrModel, scenes: Sequence[Scene], gamma: float = DEFAULT_GAMMA,
             mu: float = DEFAULT_MU, tile: int = 256) -> list[dict]:
    rows = []
    for scene in scenes:
        if scene.ground_truth is None:
            continue
        pred = infer(model, scene, gamma, tile)
        rows.append({"scene": scene.scene_id, **hdr_metrics(pred, scene.ground_truth, mu)})
    return rows


@torch.no_grad()
def train_psnr_mu(model: HdrModel, scenes: Sequence[Scene], patch_size: int, stride: int,
                  gamma: float = DEFAULT_GAMMA, mu: float = DEFAULT_MU) -> float:
    scores = []
    for scene in scenes:
        for ex in patchify(scene, patch_size, stride):
            pred = predict(model, build_inputs(ex.ldr, ex.times, gamma))
            scores.append(psnr_mu(np.clip(pred, 0, 1), ex.hdr, mu))
    return float(np.mean(scores))
