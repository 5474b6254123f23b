"""Step 1: VQGAN with the overlapped codebook.

The encoder maps an (N, 3, H, W) image to an (N, n_z, H/8, W/8) grid that is
quantized inside the codebook window of the input class and decoded back.
Inputs are sampled per example from the three gamma-normalized LDR frames
and the HDR ground truth.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .codebook import (ETAS, HDR_ETA, NonFiniteFeatures, OverlappedCodebook, QuantizationResult,
                       usage_histogram, used_code_count)
from .datasets import Example, Scene, augment, patchify
from .layers import Downsample, ResBlock, Upsample, mu_law, squash
from .radiometry import DEFAULT_GAMMA, DEFAULT_MU, psnr

log = logging.getLogger(__name__)

DOWNSAMPLE = 8
CHANNEL_MULT = (1, 2, 4, 8)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class OlcTrainConfig:
    num_codes: int = 1024
    code_dim: int = 256
    base_channels: int = 32
    beta: float = 0.25
    mu: float = DEFAULT_MU
    gamma: float = DEFAULT_GAMMA
    lambda_rec: float = 1.0
    lambda_per: float = 0.1
    lambda_vq: float = 1.0
    lambda_adv: float = 0.1
    adv_warmup: int = 1000
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    patch_size: int = 256
    stride: int = 64
    batch_size: int = 4
    steps: int = 10000
    seed: int = 0
    overlapped: bool = True
    augment: bool = True
    perceptual: str = "random"
    perceptual_weights: str | None = None
    checkpoint_every: int = 0
    log_every: int = 100
    device: str = "cpu"

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_per", "lambda_vq", "lambda_adv", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.num_codes % 4:
            raise ValueError("num_codes must be divisible by 4")
        if self.patch_size % DOWNSAMPLE:
            raise ValueError(f"patch_size must be divisible by {DOWNSAMPLE}")
        if self.perceptual not in ("random", "vgg16", "none"):
            raise ValueError(f"unknown perceptual extractor {self.perceptual!r}")


# -- networks ---------------------------------------------------------------

class VqEncoder(nn.Module):
    def __init__(self, code_dim: int, base: int = 32, in_ch: int = 3):
        super().__init__()
        widths = [base * m for m in CHANNEL_MULT]
        self.conv_in = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        blocks = []
        for i in range(3):
            blocks += [ResBlock(widths[i]), Downsample(widths[i], widths[i + 1])]
        self.blocks = nn.Sequential(*blocks)
        self.mid = ResBlock(widths[3])
        self.conv_out = nn.Conv2d(widths[3], code_dim, 1)

    def forward(self, x):
        h = self.mid(self.blocks(self.conv_in(x)))
        return self.conv_out(F.silu(h))


class VqDecoder(nn.Module):
    """Mirror of the encoder. ``forward(z, return_features=True)`` also returns
    the intermediate activations keyed by their downsample factor (8, 4, 2, 1)."""

    def __init__(self, code_dim: int, base: int = 32, out_ch: int = 3, mu: float = DEFAULT_MU):
        super().__init__()
        widths = [base * m for m in CHANNEL_MULT]
        self.widths = widths
        self.mu = mu
        self.conv_in = nn.Conv2d(code_dim, widths[3], 3, padding=1)
        self.res = nn.ModuleList([ResBlock(widths[3]), ResBlock(widths[2]), ResBlock(widths[1]),
                                  ResBlock(widths[0])])
        self.up = nn.ModuleList([Upsample(widths[3], widths[2]), Upsample(widths[2], widths[1]),
                                 Upsample(widths[1], widths[0])])
        self.conv_out = nn.Conv2d(widths[0], out_ch, 3, padding=1)

    def feature_channels(self) -> dict[int, int]:
        return {8: self.widths[3], 4: self.widths[2], 2: self.widths[1], 1: self.widths[0]}

    def forward(self, z, return_features: bool = False):
        h = self.conv_in(z)
        feats = {}
        for i, scale in enumerate((8, 4, 2, 1)):
            h = self.res[i](h)
            feats[scale] = h
            if i < 3:
                h = self.up[i](h)
        out = squash(self.conv_out(F.silu(h)), self.mu)
        return (out, feats) if return_features else out


class Discriminator(nn.Module):
    """Patch discriminator on tone-mapped images; receptive field 22 px."""

    def __init__(self, base: int = 32, in_ch: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class PerceptualExtractor(nn.Module):
    """Frozen multi-layer feature map used by the perceptual loss.

    ``kind="random"`` is a seeded, randomly initialised conv stack;
    ``kind="vgg16"`` loads torchvision VGG-16 weights from ``weights_path`` and
    taps relu1_2, relu2_2 and relu3_3.
    """

    _VGG_TAPS = (3, 8, 15)

    def __init__(self, kind: str = "random", weights_path: str | None = None, seed: int = 0):
        super().__init__()
        self.kind = kind
        if kind == "vgg16":
            import torchvision

            if not weights_path:
                raise ValueError("vgg16 perceptual extractor needs weights_path")
            vgg = torchvision.models.vgg16(weights=None)
            vgg.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
            self.layers = vgg.features[: self._VGG_TAPS[-1] + 1]
            self.taps = set(self._VGG_TAPS)
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        elif kind == "random":
            self.layers = nn.Sequential(
                nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
                nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
                nn.AvgPool2d(2),
                nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(),
            )
            self.taps = {3, 6}
            gen = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                for m in self.layers:
                    if isinstance(m, nn.Conv2d):
                        fan_in = m.in_channels * 9
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                        m.bias.zero_()
        else:
            raise ValueError(f"unknown perceptual extractor {kind!r}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x) -> list[torch.Tensor]:
        if self.kind == "vgg16":
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def perceptual_distance(phi: nn.Module | None, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if phi is None:
        return a.new_zeros(())
    return sum(torch.mean(torch.abs(fa - fb)) for fa, fb in zip(phi(a), phi(b)))


class VQGAN(nn.Module):
    """Encoder, overlapped codebook and decoder (the discriminator lives apart)."""

    def __init__(self, num_codes: int = 1024, code_dim: int = 256, base: int = 32,
                 beta: float = 0.25, overlapped: bool = True, mu: float = DEFAULT_MU,
                 seed: int | None = None):
        super().__init__()
        self.encoder = VqEncoder(code_dim, base)
        self.codebook = OverlappedCodebook(num_codes, code_dim, beta, overlapped, seed)
        self.decoder = VqDecoder(code_dim, base, mu=mu)

    def encode(self, x, eta):
        if x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {DOWNSAMPLE}")
        z = self.encoder(x)
        zq, res = self.codebook(z, eta)
        return z, zq, res

    def forward(self, x, eta):
        """Returns (reconstruction, quantization result, encoder output)."""
        z, zq, res = self.encode(x, eta)
        return self.decoder(zq), res, z


def build_vqgan(cfg: OlcTrainConfig) -> VQGAN:
    return VQGAN(cfg.num_codes, cfg.code_dim, cfg.base_channels, cfg.beta, cfg.overlapped,
                 cfg.mu, seed=cfg.seed)


# -- inputs and losses ------------------------------------------------------

def sample_eta(rng: np.random.Generator, size: int | None = None):
    """Uniform draw from {1, 2, 3, 4}."""
    return rng.integers(1, 5, size=size)


def sample_input(ldr: np.ndarray, times: Sequence[float], hdr: np.ndarray | None, eta: int,
                 gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """The network input for class ``eta``: ``L_eta ** gamma / t_eta`` for an
    LDR class, the (peak-normalized) HDR image for ``eta == 4``.

    ``ldr`` holds the three frames as (3, H, W, 3); an ``ExposureStack`` works too.
    """
    eta = int(eta)
    if eta not in (1, 2, 3, 4):
        raise ValueError(f"eta must be in 1..4, got {eta}")
    if eta == HDR_ETA:
        if hdr is None:
            raise ValueError("eta=4 needs a ground-truth HDR image")
        return np.asarray(hdr)
    if hasattr(ldr, "pixels") and callable(ldr.pixels):
        ldr = ldr.pixels()
    return np.asarray(ldr[eta - 1], dtype=np.float64) ** gamma / times[eta - 1]


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, C) arrays into an (N, C, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    per: torch.Tensor
    vq: torch.Tensor
    adv: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f: float(getattr(self, f).detach()) for f in ("rec", "per", "vq", "adv", "total")}


def olc_losses(x: torch.Tensor, x_hat: torch.Tensor, quant: QuantizationResult | None,
               disc: nn.Module | None = None, phi: nn.Module | None = None,
               lambda_rec: float = 1.0, lambda_per: float = 0.1, lambda_vq: float = 1.0,
               lambda_adv: float = 0.0, mu: float = DEFAULT_MU) -> LossBreakdown:
    """Weighted Step-1 objective. Both images are clamped to [0, 1] and tone
    mapped before the L1 and perceptual terms; ``adv = -mean(disc(tau(x_hat)))``."""
    tx = mu_law(x.clamp(0.0, 1.0), mu)
    tx_hat = mu_law(x_hat.clamp(0.0, 1.0), mu)
    zero = tx.new_zeros(())
    rec = torch.mean(torch.abs(tx - tx_hat))
    per = perceptual_distance(phi, tx, tx_hat) if lambda_per > 0 or phi is not None else zero
    vq = quant.loss if quant is not None else zero
    adv = -torch.mean(disc(tx_hat)) if disc is not None else zero
    total = lambda_rec * rec + lambda_per * per + lambda_vq * vq + lambda_adv * adv
    return LossBreakdown(rec, per, vq, adv, total)


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return torch.mean(F.relu(1.0 - real_logits)) + torch.mean(F.relu(1.0 + fake_logits))


# -- training ---------------------------------------------------------------

@dataclass
class OlcRun:
    model: VQGAN
    disc: Discriminator
    config: OlcTrainConfig
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None


def _batch(examples: Sequence[Example], rng: np.random.Generator, cfg: OlcTrainConfig):
    idx = rng.integers(len(examples), size=cfg.batch_size)
    etas = sample_eta(rng, cfg.batch_size)
    images = []
    for i, eta in zip(idx, etas):
        ex = augment(examples[i], rng) if cfg.augment else examples[i]
        images.append(sample_input(ex.ldr, ex.times, ex.hdr, eta, cfg.gamma))
    return to_tensor(images), torch.from_numpy(etas)


def save_olc_checkpoint(path, run: OlcRun, step: int, metrics=None) -> str:
    cfg = asdict(run.config)
    cfg["downsample"] = DOWNSAMPLE
    return ckpt.save_checkpoint(
        path, "olc", cfg, step, run.config.seed,
        {"encoder": run.model.encoder, "decoder": run.model.decoder, "discriminator": run.disc},
        codebook=run.model.codebook, metrics=metrics)


def load_olc_checkpoint(path) -> tuple[VQGAN, OlcTrainConfig, dict]:
    manifest = ckpt.read_manifest(path)
    if manifest.get("kind") != "olc":
        raise ckpt.CheckpointError(f"{path}: expected a Step-1 (olc) checkpoint, got {manifest.get('kind')!r}")
    conf = dict(manifest["config"])
    if conf.pop("downsample", DOWNSAMPLE) != DOWNSAMPLE:
        raise ckpt.CheckpointError(f"{path}: downsample factor differs from {DOWNSAMPLE}")
    cfg = OlcTrainConfig(**conf)
    model = build_vqgan(cfg)
    vectors, meta = ckpt.load_codebook_tensor(path)
    if (meta["K"], meta["n_z"]) != (cfg.num_codes, cfg.code_dim):
        raise ckpt.CheckpointError(f"{path}: codebook shape {meta['K']}x{meta['n_z']} disagrees with config")
    try:
        model.encoder.load_state_dict(ckpt.load_state(path, "encoder"))
        model.decoder.load_state_dict(ckpt.load_state(path, "decoder"))
    except RuntimeError as exc:
        raise ckpt.CheckpointError(f"{path}: weights do not match architecture ({exc})") from exc
    with torch.no_grad():
        model.codebook.vectors.copy_(vectors)
    return model, cfg, manifest


def _diverged(out_dir, step: int, etas: torch.Tensor, record: dict):
    dump = {"step": step, "etas": etas.tolist(), "losses": record}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "divergence.json"), "w") as fh:
            json.dump(dump, fh, indent=2, default=str)
    raise TrainingDiverged(f"non-finite values at step {step}: {record}", dump)


def train_olc(cfg: OlcTrainConfig, scenes: Sequence[Scene], out_dir: str | None = None,
              callback: Callable[[int, dict], None] | None = None) -> OlcRun:
    """Optimise encoder, decoder and codebook (one Adam) and the discriminator
    (another Adam). One input class is drawn per example."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    examples = [ex for s in scenes for ex in patchify(s, cfg.patch_size, cfg.stride)]
    if not examples:
        raise ValueError("no training patches")
    if any(ex.hdr is None for ex in examples):
        raise ValueError("Step-1 training needs ground-truth HDR for every scene")

    dev = torch.device(cfg.device)
    model = build_vqgan(cfg).to(dev)
    disc = Discriminator(max(8, cfg.base_channels)).to(dev)
    phi = PerceptualExtractor(cfg.perceptual, cfg.perceptual_weights, cfg.seed).to(dev) \
        if cfg.perceptual != "none" and cfg.lambda_per > 0 else None
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr_g, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.5, 0.9))
    run = OlcRun(model, disc, cfg)

    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        x, etas = _batch(examples, rng, cfg)
        x, etas = x.to(dev), etas.to(dev)
        try:
            x_hat, quant, _ = model(x, etas)
        except NonFiniteFeatures as exc:
            _diverged(out_dir, step, etas, {"error": str(exc)})
        adv_on = cfg.lambda_adv > 0 and step > cfg.adv_warmup
        losses = olc_losses(x, x_hat, quant, disc if adv_on else None, phi, cfg.lambda_rec,
                            cfg.lambda_per, cfg.lambda_vq, cfg.lambda_adv if adv_on else 0.0, cfg.mu)
        record = {"step": step, **losses.floats()}
        if not all(math.isfinite(v) for v in record.values()):
            _diverged(out_dir, step, etas, record)

        opt_g.zero_grad(set_to_none=True)
        losses.total.backward()
        opt_g.step()

        if adv_on:
            tx = mu_law(x.clamp(0, 1), cfg.mu)
            tx_hat = mu_law(x_hat.detach().clamp(0, 1), cfg.mu)
            d_loss = hinge_d_loss(disc(tx), disc(tx_hat))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            record["d_loss"] = float(d_loss.detach())

        run.history.append(record)
        if callback:
            callback(step, record)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("olc step %d rec %.4f vq %.4f (%.1fs)", step, record["rec"], record["vq"],
                     time.perf_counter() - t0)
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_olc_checkpoint(os.path.join(out_dir, "checkpoint"), run, step)

    if out_dir:
        run.checkpoint = save_olc_checkpoint(os.path.join(out_dir, "checkpoint"), run, cfg.steps,
                                             {"final_rec": run.history[-1]["rec"]})
    return run


# -- evaluation helpers -----------------------------------------------------

@torch.no_grad()
def reconstruct(model: VQGAN, x: torch.Tensor, eta) -> torch.Tensor:
    """Decode the windowed quantization of ``x``; same shape as ``x``."""
    model.eval()
    dev = next(model.parameters()).device
    x_hat, _, _ = model(x.to(dev), eta)
    return x_hat.cpu()


@torch.no_grad()
def reconstruction_psnr_mu(model: VQGAN, scenes: Sequence[Scene], patch_size: int, stride: int,
                           etas: Sequence[int] = (1, 2, 3, 4), gamma: float = DEFAULT_GAMMA,
                           mu: float = DEFAULT_MU) -> float:
    """Mean tone-mapped PSNR over every patch and input class."""
    scores = []
    for scene in scenes:
        for ex in patchify(scene, patch_size, stride):
            for eta in etas:
                x = to_tensor([sample_input(ex.ldr, ex.times, ex.hdr, eta, gamma)])
                x_hat = reconstruct(model, x, eta)
                a = mu_law(x.clamp(0, 1), mu).double().numpy()
                b = mu_law(x_hat.clamp(0, 1), mu).double().numpy()
                scores.append(psnr(a, b))
    return float(np.mean(scores))


@torch.no_grad()
def code_indices(model: VQGAN, images: Sequence[np.ndarray], eta: int) -> list[torch.Tensor]:
    model.eval()
    dev = next(model.parameters()).device
    return [model.encode(to_tensor([im]).to(dev), eta)[2].indices.cpu() for im in images]


@torch.no_grad()
def codebook_usage(model: VQGAN, scenes: Sequence[Scene], gamma: float = DEFAULT_GAMMA) -> dict:
    """Code-usage histograms over whole scenes.

    ``per_eta[eta]`` quantizes each input class inside its own window;
    ``full`` quantizes every class against the whole codebook. Scenes without
    ground truth contribute no HDR (``eta == 4``) positions.
    """
    k = model.codebook.num_codes
    per_eta = {eta: [] for eta in ETAS}
    full = []
    overlapped = model.codebook.overlapped
    for scene in scenes:
        for eta in ETAS:
            if eta == HDR_ETA and scene.ground_truth is None:
                continue
            x = sample_input(scene.stack, scene.stack.times, scene.ground_truth, eta, gamma)
            per_eta[eta] += code_indices(model, [x], eta)
            model.codebook.overlapped = False
            try:
                full += code_indices(model, [x], eta)
            finally:
                model.codebook.overlapped = overlapped

    def summary(arrays):
        hist = usage_histogram(arrays, k)
        return {"histogram": hist.tolist(), "used": used_code_count(hist), "positions": int(hist.sum())}

    return {"num_codes": k, "full": summary(full), "per_eta": {e: summary(a) for e, a in per_eta.items()}}
