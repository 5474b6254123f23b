"""Overlapped codebook: segment windows, windowed nearest-neighbour
quantization, straight-through gradients, the VQ loss and usage statistics.

Input classes ``eta``: 1 = short, 2 = mid, 3 = long exposure, 4 = HDR.
Each LDR class owns a contiguous half-width window of the codebook that
slides by ``alpha = K / 4``; the HDR class sees every code.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

ETAS = (1, 2, 3, 4)
HDR_ETA = 4


class NonFiniteFeatures(ValueError):
    """Raised when the features handed to the quantizer contain NaN."""

EtaLike = Union[int, Sequence[int], torch.Tensor]


def _check_k(num_codes: int) -> None:
    if num_codes <= 0 or num_codes % 4:
        raise ValueError(f"codebook size must be a positive multiple of 4, got {num_codes}")


def segment_range(eta: int, num_codes: int) -> range:
    """Code indices available to input class ``eta``.

    LDR class ``i`` gets ``[(i - 1) * alpha, (i + 1) * alpha)``; HDR gets all.
    """
    _check_k(num_codes)
    eta = int(eta)
    if eta not in ETAS:
        raise ValueError(f"eta must be one of {ETAS}, got {eta}")
    if eta == HDR_ETA:
        return range(0, num_codes)
    alpha = num_codes // 4
    return range((eta - 1) * alpha, (eta + 1) * alpha)


def window_mask(eta: EtaLike, num_codes: int, overlapped: bool = True) -> torch.Tensor:
    """Boolean (N, K) mask of allowed codes for a batch of classes (or (1, K))."""
    etas = torch.as_tensor(eta).reshape(-1).tolist()
    mask = torch.zeros(len(etas), num_codes, dtype=torch.bool)
    for row, e in enumerate(etas):
        r = segment_range(e if overlapped else HDR_ETA, num_codes)
        if e not in ETAS:
            raise ValueError(f"eta must be one of {ETAS}, got {e}")
        mask[row, r.start:r.stop] = True
    return mask


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, encoded, quantized):
        return quantized.detach().clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(encoded: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Returns ``quantized`` unchanged in the forward pass and routes the
    incoming gradient to ``encoded`` as if the quantizer were the identity.

    Equivalent to ``encoded + (quantized - encoded).detach()`` but bit-exact in
    the forward pass.
    """
    if encoded.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {tuple(encoded.shape)} vs {tuple(quantized.shape)}")
    return _StraightThrough.apply(encoded, quantized)


def vq_loss(encoded: torch.Tensor, quantized: torch.Tensor, beta: float = 0.25):
    """Codebook and commitment terms, mean-reduced.

    Returns ``(codebook_loss, commitment_loss, total)`` where
    ``total = codebook_loss + beta * commitment_loss``. The codebook term only
    sends gradient to ``quantized`` and the commitment term only to ``encoded``.
    """
    if encoded.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {tuple(encoded.shape)} vs {tuple(quantized.shape)}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    codebook_loss = torch.mean((encoded.detach() - quantized) ** 2)
    commitment_loss = torch.mean((quantized.detach() - encoded) ** 2)
    return codebook_loss, commitment_loss, codebook_loss + beta * commitment_loss


@dataclass
class QuantizationResult:
    quantized: torch.Tensor
    indices: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor
    loss: torch.Tensor


def nearest_codes(flat: torch.Tensor, vectors: torch.Tensor, allowed: torch.Tensor,
                  chunk: int = 1 << 22) -> torch.Tensor:
    """Index of the nearest allowed code for each row of ``flat``.

    ``allowed`` is a (P, K) or (1, K) boolean mask. Distances are evaluated as
    explicit sums of squared differences so ties resolve to the lowest index
    the same way an exhaustive search would.
    """
    n, k = flat.shape[0], vectors.shape[0]
    rows = max(1, chunk // max(1, k * vectors.shape[1]))
    out = torch.empty(n, dtype=torch.long, device=flat.device)
    for start in range(0, n, rows):
        part = flat[start:start + rows]
        d = ((part[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
        mask = allowed if allowed.shape[0] == 1 else allowed[start:start + rows]
        d = d.masked_fill(~mask, float("inf"))
        out[start:start + rows] = torch.argmin(d, dim=1)
    return out


class OverlappedCodebook(nn.Module):
    """K x n_z code vectors with exposure-conditioned windows.

    With ``overlapped=False`` every class uses the whole codebook (the vanilla
    VQ baseline).
    """

    def __init__(self, num_codes: int = 1024, code_dim: int = 256, beta: float = 0.25,
                 overlapped: bool = True, seed: int | None = None):
        super().__init__()
        _check_k(num_codes)
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.beta = beta
        self.overlapped = overlapped
        self.seed = seed
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init = (torch.rand(num_codes, code_dim, generator=gen) * 2 - 1) / num_codes
        self.vectors = nn.Parameter(init)

    @property
    def alpha(self) -> int:
        return self.num_codes // 4

    def window(self, eta: int) -> range:
        return segment_range(eta if self.overlapped else HDR_ETA, self.num_codes)

    def quantize(self, features: torch.Tensor, eta: EtaLike) -> QuantizationResult:
        """Quantize channel-last ``features`` of shape (N, h, w, n_z) or (h, w, n_z).

        ``eta`` is a single class or one class per batch element.
        """
        if features.shape[-1] != self.code_dim:
            raise ValueError(f"feature depth {features.shape[-1]} != code dim {self.code_dim}")
        if torch.isnan(features).any():
            raise NonFiniteFeatures("features contain NaN")
        batched = features.dim() == 4
        feats = features if batched else features.unsqueeze(0)
        n = feats.shape[0]
        per_item = feats[0].numel() // self.code_dim

        allowed = window_mask(eta, self.num_codes, self.overlapped).to(feats.device)
        if allowed.shape[0] not in (1, n):
            raise ValueError(f"got {allowed.shape[0]} eta values for a batch of {n}")
        if allowed.shape[0] == n and n > 1:
            allowed = allowed.repeat_interleave(per_item, dim=0)

        flat = feats.reshape(-1, self.code_dim)
        vectors = self.vectors.to(flat.dtype)
        with torch.no_grad():
            idx = nearest_codes(flat.detach(), vectors.detach(), allowed)
        quantized = vectors[idx].reshape(feats.shape)
        cb, commit, total = vq_loss(feats, quantized, self.beta)
        idx = idx.reshape(feats.shape[:-1])
        if not batched:
            quantized, idx = quantized[0], idx[0]
        return QuantizationResult(quantized, idx, cb, commit, total)

    def forward(self, features: torch.Tensor, eta: EtaLike):
        """NCHW convenience wrapper: returns (straight-through output, result)."""
        res = self.quantize(features.permute(0, 2, 3, 1), eta)
        q = res.quantized.permute(0, 3, 1, 2)
        return straight_through(features, q), res


def usage_histogram(indices: Iterable, num_codes: int) -> np.ndarray:
    """Count how often each code index occurs across a collection of index arrays."""
    counts = np.zeros(num_codes, dtype=np.int64)
    for arr in indices:
        a = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        a = a.reshape(-1).astype(np.int64)
        if a.size == 0:
            continue
        if a.min() < 0 or a.max() >= num_codes:
            raise ValueError(f"code index out of range [0, {num_codes})")
        counts += np.bincount(a, minlength=num_codes)
    return counts


def used_code_count(histogram: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(histogram) >= 1))


# --- serialization: raw little-endian float32 blob + key=value manifest ---

BLOB_NAME = "codebook.f32"
MANIFEST_NAME = "codebook.txt"


def save_codebook(directory: str | os.PathLike, vectors, seed: int | None = None) -> None:
    vectors = vectors.detach().cpu().numpy() if isinstance(vectors, torch.Tensor) else np.asarray(vectors)
    k, n_z = vectors.shape
    _check_k(k)
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    lines = [f"K={k}", f"n_z={n_z}", f"alpha={k // 4}", f"seed={'' if seed is None else seed}"]
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_codebook(directory: str | os.PathLike) -> tuple[np.ndarray, dict]:
    meta: dict = {}
    with open(os.path.join(directory, MANIFEST_NAME)) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    k, n_z = int(meta["K"]), int(meta["n_z"])
    if int(meta.get("alpha", k // 4)) != k // 4:
        raise ValueError("codebook manifest alpha != K/4")
    raw = np.fromfile(os.path.join(directory, BLOB_NAME), dtype="<f4")
    if raw.size != k * n_z:
        raise ValueError(f"codebook blob holds {raw.size} floats, manifest says {k}x{n_z}")
    meta = {"K": k, "n_z": n_z, "alpha": k // 4,
            "seed": int(meta["seed"]) if meta.get("seed") else None}
    return raw.reshape(k, n_z).astype(np.float32), meta
