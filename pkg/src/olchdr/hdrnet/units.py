"""Parallel alignment (PA), frame-selective merging (FSM) and residual fusing
(RF) units, plus the simpler merge/fuse variants used for ablations."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..layers import ResBlock


def deform_conv2d(x, offset, weight, bias=None, padding: int = 0):
    """Deformable convolution (stride 1, dilation 1) built on ``grid_sample``.

    Same argument layout and result as ``torchvision.ops.deform_conv2d``: the
    offset tensor holds ``(dy, dx)`` pairs per offset group and kernel tap.
    Sampling each tap and contracting with a 1x1 convolution has a much
    cheaper backward pass on CPU than the torchvision kernel.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ValueError(f"weight expects {c_in} input channels, got {c}")
    taps = kh * kw
    groups = offset.shape[1] // (2 * taps)
    if groups * 2 * taps != offset.shape[1] or c % groups:
        raise ValueError(f"offset channels {offset.shape[1]} do not fit kernel {kh}x{kw} and {c} channels")
    h_out, w_out = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if offset.shape[-2:] != (h_out, w_out):
        raise ValueError(f"offset size {tuple(offset.shape[-2:])} != output size {(h_out, w_out)}")

    off = offset.view(n, groups, taps, 2, h_out, w_out)
    ky, kx = torch.meshgrid(torch.arange(kh, dtype=x.dtype, device=x.device),
                            torch.arange(kw, dtype=x.dtype, device=x.device), indexing="ij")
    ys = torch.arange(h_out, dtype=x.dtype, device=x.device) - padding
    xs = torch.arange(w_out, dtype=x.dtype, device=x.device) - padding
    py = ys.view(1, 1, 1, -1, 1) + ky.reshape(1, 1, taps, 1, 1) + off[:, :, :, 0]
    px = xs.view(1, 1, 1, 1, -1) + kx.reshape(1, 1, taps, 1, 1) + off[:, :, :, 1]
    # pixel centres under align_corners=False
    grid = torch.stack([(2 * px + 1) / w - 1, (2 * py + 1) / h - 1], dim=-1)
    grid = grid.view(n * groups, taps * h_out, w_out, 2)
    cols = F.grid_sample(x.view(n * groups, c // groups, h, w), grid, mode="bilinear",
                         padding_mode="zeros", align_corners=False)
    cols = cols.view(n, c * taps, h_out, w_out)
    return F.conv2d(cols, weight.reshape(c_out, c * taps, 1, 1), bias)


class OffsetModule(nn.Module):
    """3x3 and 5x5 branches over [F_nr, F_ref] blended by a selective-kernel
    softmax; produces the offset feature F_o."""

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        self.branch3 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.branch5 = nn.Conv2d(2 * channels, channels, 5, padding=2)
        hidden = max(channels // reduction, 4)
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.select = nn.Conv2d(hidden, 2 * channels, 1)

    def forward(self, f_nr, f_ref):
        x = torch.cat([f_nr, f_ref], dim=1)
        b3 = F.leaky_relu(self.branch3(x), 0.1)
        b5 = F.leaky_relu(self.branch5(x), 0.1)
        s = F.relu(self.squeeze(F.adaptive_avg_pool2d(b3 + b5, 1)))
        n, c = b3.shape[:2]
        a = torch.softmax(self.select(s).view(n, 2, c, 1, 1), dim=1)
        return a[:, 0] * b3 + a[:, 1] * b5


class AlignmentUnit(nn.Module):
    """Aligns a non-reference feature map to the reference.

    ``F_d`` is a deformable 3x3 convolution of ``F_nr`` driven by offsets from
    ``F_o``; ``F_s`` is ``F_nr`` gated by a sigmoid mask from ``F_o``. The two
    are concatenated and fused by a 3x3 convolution. Offsets start at zero.
    """

    def __init__(self, channels: int, deform_groups: int = 8, kernel_size: int = 3):
        super().__init__()
        if channels % deform_groups:
            raise ValueError(f"channels ({channels}) must be divisible by deform_groups ({deform_groups})")
        self.channels = channels
        self.deform_groups = deform_groups
        self.kernel_size = kernel_size
        self.offset_module = OffsetModule(channels)
        self.offset_conv = nn.Conv2d(channels, 2 * deform_groups * kernel_size ** 2, 3, padding=1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)
        self.deform_weight = nn.Parameter(torch.empty(channels, channels, kernel_size, kernel_size))
        self.deform_bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.deform_weight, a=5 ** 0.5)
        self.attn_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.fuse = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def deform(self, f_nr, offsets):
        return deform_conv2d(f_nr, offsets, self.deform_weight, self.deform_bias,
                             padding=self.kernel_size // 2)

    def forward(self, f_nr, f_ref):
        if f_nr.shape != f_ref.shape:
            raise ValueError(f"shape mismatch: {tuple(f_nr.shape)} vs {tuple(f_ref.shape)}")
        f_o = self.offset_module(f_nr, f_ref)
        f_d = self.deform(f_nr, self.offset_conv(f_o))
        f_s = f_nr * torch.sigmoid(self.attn_conv(f_o))
        return self.fuse(torch.cat([f_d, f_s], dim=1))


class MergeUnit(nn.Module):
    """Frame-selective merging: channel attention with a softmax across frames.

    ``U = sum_i F_i * v_i`` where, for every channel, the ``v_i`` are
    non-negative and sum to one.
    """

    def __init__(self, channels: int, frames: int = 3, reduction: int = 2):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.branches = nn.ModuleList([nn.Conv2d(hidden, channels, 1) for _ in range(frames)])

    def weights(self, feats):
        s = F.relu(self.squeeze(F.adaptive_avg_pool2d(sum(feats), 1)))
        logits = torch.stack([b(s) for b in self.branches], dim=0)
        return torch.softmax(logits, dim=0)

    def forward(self, *feats):
        v = self.weights(feats)
        return sum(f * v[i] for i, f in enumerate(feats))


class SumMerge(nn.Module):
    def forward(self, *feats):
        return sum(feats)


class ConcatMerge(nn.Module):
    def __init__(self, channels: int, frames: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(frames * channels, channels, 1)

    def forward(self, *feats):
        return self.conv(torch.cat(feats, dim=1))


class ReferenceMerge(nn.Module):
    """Baseline skip: only the reference (mid) frame's features."""

    def forward(self, *feats):
        return feats[1]


def residual_affine(f: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return (gamma * f + beta) + f


class FuseUnit(nn.Module):
    """Residual fusing: a residual block over the conditioning features (merged
    context and/or VQ-decoder features) predicts per-position ``gamma`` and
    ``beta``; output ``(gamma * F + beta) + F``. The last conv is
    zero-initialised so the unit starts as the identity on ``F``."""

    def __init__(self, channels: int, cond_channels: int):
        super().__init__()
        self.body = ResBlock(cond_channels, channels)
        self.head = nn.Conv2d(channels, 2 * channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def affine_params(self, cond):
        gamma, beta = self.head(F.silu(self.body(cond))).chunk(2, dim=1)
        return gamma, beta

    def forward(self, f, *conds):
        gamma, beta = self.affine_params(torch.cat(conds, dim=1))
        return residual_affine(f, gamma, beta)


class ConcatFuse(nn.Module):
    """Ablation stand-in for RF: concatenate and convolve."""

    def __init__(self, channels: int, cond_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels + cond_channels, channels, 3, padding=1)

    def forward(self, f, *conds):
        return self.conv(torch.cat([f, *conds], dim=1))
