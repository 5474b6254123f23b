"""Small convolutional building blocks and the torch-side tone map."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .radiometry import DEFAULT_MU


def mu_law(x: torch.Tensor, mu: float = DEFAULT_MU) -> torch.Tensor:
    return torch.log1p(mu * x) / math.log1p(mu)


def inverse_mu_law(t: torch.Tensor, mu: float = DEFAULT_MU) -> torch.Tensor:
    return torch.expm1(t * math.log1p(mu)) / mu


def squash(logits: torch.Tensor, mu: float = DEFAULT_MU) -> torch.Tensor:
    """Map unbounded decoder output to linear radiance in [0, 1].

    A sigmoid produces the tone-mapped value, which is then expanded back to
    the linear domain, so the tone-mapped prediction is simply the sigmoid.
    """
    return inverse_mu_law(torch.sigmoid(logits), mu)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        out_ch = out_ch or in_ch
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv2(F.silu(self.conv1(F.silu(x))))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def parameter_digest(module: nn.Module) -> str:
    """Stable hash of every parameter and buffer, for freeze checks."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
