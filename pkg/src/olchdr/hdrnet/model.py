"""Dual-decoder HDR network.

Per-frame features are aligned to the reference, encoded at scales
1, 1/2, 1/4 and 1/8, merged at 1/4 (input of the fidelity decoder) and at 1/8
(the latent that is quantized with the full codebook and decoded by the frozen
Step-1 decoder). The fidelity decoder is conditioned, at scales 1/4, 1/2 and
1, on merged frame contexts and on the frozen decoder's features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..autoencoder import DOWNSAMPLE, VqDecoder, VqEncoder
from ..codebook import HDR_ETA, OverlappedCodebook
from ..layers import Downsample, ResBlock, Upsample, squash
from ..radiometry import DEFAULT_GAMMA, DEFAULT_MU
from .units import (AlignmentUnit, ConcatFuse, ConcatMerge, FuseUnit, MergeUnit, ReferenceMerge,
                    SumMerge)

MERGE_MODES = ("reference", "sum", "concat", "fsm")
SCALES = (1, 2, 4)

# Table-style ablation ladder: each row adds one component.
ABLATIONS = {
    "baseline": dict(use_pa=False, merge="reference", use_vq_decoder=False, use_rf=False),
    "pa": dict(use_pa=True, merge="reference", use_vq_decoder=False, use_rf=False),
    "pa_sum": dict(use_pa=True, merge="sum", use_vq_decoder=False, use_rf=False),
    "pa_concat": dict(use_pa=True, merge="concat", use_vq_decoder=False, use_rf=False),
    "pa_fsm": dict(use_pa=True, merge="fsm", use_vq_decoder=False, use_rf=False),
    "pa_fsm_vq": dict(use_pa=True, merge="fsm", use_vq_decoder=True, use_rf=False),
    "full": dict(use_pa=True, merge="fsm", use_vq_decoder=True, use_rf=True),
}


@dataclass
class HdrArch:
    base_channels: int = 32
    use_pa: bool = True
    merge: str = "fsm"
    use_vq_decoder: bool = True
    use_rf: bool = True
    shared_encoders: bool = False
    deform_groups: int = 8
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if self.merge not in MERGE_MODES:
            raise ValueError(f"merge must be one of {MERGE_MODES}, got {self.merge!r}")
        if self.base_channels % self.deform_groups:
            raise ValueError("base_channels must be divisible by deform_groups")


def build_inputs(ldr: np.ndarray, times, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Per-frame network input ``[L_i, L_i ** gamma / t_i]``: (3, H, W, 6)."""
    if hasattr(ldr, "pixels") and callable(ldr.pixels):
        ldr = ldr.pixels()
    ldr = np.asarray(ldr, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64).reshape(3, 1, 1, 1)
    return np.concatenate([ldr, ldr ** gamma / t], axis=-1)


def inputs_to_tensor(batch, dtype=torch.float32) -> torch.Tensor:
    """(N, 3, H, W, 6) arrays -> (N, 3, 6, H, W) tensor."""
    arr = np.asarray(batch)
    if arr.ndim == 4:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 1, 4, 2, 3))).to(dtype)


class FrameEncoder(nn.Module):
    def __init__(self, base: int):
        super().__init__()
        w = [base, 2 * base, 4 * base, 8 * base]
        self.res = nn.ModuleList([ResBlock(c) for c in w])
        self.down = nn.ModuleList([Downsample(w[i], w[i + 1]) for i in range(3)])

    def forward(self, x) -> dict[int, torch.Tensor]:
        feats = {}
        for i, scale in enumerate((1, 2, 4, 8)):
            x = self.res[i](x)
            feats[scale] = x
            if i < 3:
                x = self.down[i](x)
        return feats


class VqPrior(nn.Module):
    """Frozen Step-1 components: encoder (for ground-truth codes), codebook, decoder."""

    def __init__(self, encoder: VqEncoder, codebook: OverlappedCodebook, decoder: VqDecoder):
        super().__init__()
        self.encoder = encoder
        self.codebook = codebook
        self.decoder = decoder
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @property
    def code_dim(self) -> int:
        return self.codebook.code_dim

    def quantize_full(self, z):
        """Full-codebook quantization of an NCHW latent (straight-through)."""
        zq, res = self.codebook(z, HDR_ETA)
        return zq, res

    @torch.no_grad()
    def ground_truth_code(self, hdr: torch.Tensor) -> torch.Tensor:
        z = self.encoder(hdr)
        return self.codebook.quantize(z.permute(0, 2, 3, 1), HDR_ETA).quantized.permute(0, 3, 1, 2)


class HdrModel(nn.Module):
    def __init__(self, arch: HdrArch, prior: VqPrior | None = None):
        super().__init__()
        self.arch = arch
        c = arch.base_channels
        widths = {1: c, 2: 2 * c, 4: 4 * c, 8: 8 * c}
        self.widths = widths
        if arch.use_vq_decoder and prior is None:
            raise ValueError("the VQ-decoder branch needs a Step-1 prior")

        n_conv = 1 if arch.shared_encoders else 3
        self.frame_convs = nn.ModuleList([nn.Conv2d(6, c, 3, padding=1) for _ in range(n_conv)])
        if arch.use_pa:
            self.align = nn.ModuleList([AlignmentUnit(c, arch.deform_groups) for _ in range(2)])
            self.ref_conv = nn.Conv2d(c, c, 3, padding=1)
        self.encoders = nn.ModuleList([FrameEncoder(c) for _ in range(n_conv)])

        self.merge_head = nn.Conv2d(3 * widths[4], widths[4], 3, padding=1)
        self.mergers = nn.ModuleDict({str(s): self._merger(widths[s]) for s in SCALES})

        self.prior = prior if arch.use_vq_decoder else None
        if self.prior is not None:
            n_z = prior.code_dim
            self.vq_head = nn.Sequential(nn.Conv2d(3 * widths[8], widths[8], 3, padding=1), nn.SiLU(),
                                         nn.Conv2d(widths[8], n_z, 1))
            vq_ch = prior.decoder.feature_channels()
            self.vq_proj = nn.ModuleDict({str(s): nn.Conv2d(vq_ch[s], widths[s], 1) for s in SCALES})

        fuse_cls = FuseUnit if arch.use_rf else ConcatFuse
        n_cond = 1 + int(self.prior is not None)
        self.fusers = nn.ModuleDict({str(s): fuse_cls(widths[s], n_cond * widths[s]) for s in SCALES})
        self.dec_res = nn.ModuleDict({str(s): ResBlock(widths[s]) for s in SCALES})
        self.dec_up = nn.ModuleDict({"4": Upsample(widths[4], widths[2]), "2": Upsample(widths[2], widths[1])})
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)

    def _merger(self, ch):
        mode = self.arch.merge
        if mode == "fsm":
            return MergeUnit(ch)
        if mode == "concat":
            return ConcatMerge(ch)
        if mode == "sum":
            return SumMerge()
        return ReferenceMerge()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def frame_features(self, inputs: torch.Tensor):
        """Aligned per-frame features at full resolution."""
        convs = self.frame_convs if len(self.frame_convs) == 3 else [self.frame_convs[0]] * 3
        f = [conv(inputs[:, i]) for i, conv in enumerate(convs)]
        if self.arch.use_pa:
            f = [self.align[0](f[0], f[1]), self.ref_conv(f[1]), self.align[1](f[2], f[1])]
        return f

    def forward(self, inputs: torch.Tensor):
        """``inputs``: (N, 3, 6, H, W). Returns ``(hdr, z_vq, indices)``; the
        last two are ``None`` when the VQ-decoder branch is disabled."""
        if inputs.dim() != 5 or inputs.shape[1] != 3 or inputs.shape[2] != 6:
            raise ValueError(f"expected (N, 3, 6, H, W) input, got {tuple(inputs.shape)}")
        if inputs.shape[-1] % DOWNSAMPLE or inputs.shape[-2] % DOWNSAMPLE:
            raise ValueError(f"spatial size {tuple(inputs.shape[-2:])} not divisible by {DOWNSAMPLE}")
        frames = self.frame_features(inputs)
        encs = self.encoders if len(self.encoders) == 3 else [self.encoders[0]] * 3
        feats = [enc(f) for enc, f in zip(encs, frames)]

        contexts = {s: self.mergers[str(s)](*(fe[s] for fe in feats)) for s in SCALES}
        h = self.merge_head(torch.cat([fe[4] for fe in feats], dim=1))

        z_vq = indices = None
        vq_feats = {}
        if self.prior is not None:
            z_vq = self.vq_head(torch.cat([fe[8] for fe in feats], dim=1))
            zq, res = self.prior.quantize_full(z_vq)
            indices = res.indices
            _, dec_feats = self.prior.decoder(zq, return_features=True)
            vq_feats = {s: self.vq_proj[str(s)](dec_feats[s]) for s in SCALES}

        for s in (4, 2, 1):
            conds = [contexts[s]] + ([vq_feats[s]] if vq_feats else [])
            h = self.fusers[str(s)](h, *conds)
            h = self.dec_res[str(s)](h)
            if s > 1:
                h = self.dec_up[str(s)](h)
        out = squash(self.conv_out(F.silu(h)), self.arch.mu)
        return out, z_vq, indices
