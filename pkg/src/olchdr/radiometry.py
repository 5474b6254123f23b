"""Non-learned image math: exposure normalization, triangle-weight fusion,
mu-law tone mapping and fidelity metrics.

All images are float arrays of shape (H, W, 3). Functions never modify their
inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

DEFAULT_GAMMA = 2.2
DEFAULT_MU = 5000.0


@dataclass(frozen=True)
class LdrFrame:
    """One exposure of a bracket.

    ``exposure_time`` is on a relative scale; frames produced by the loader
    and the synthetic generator satisfy ``exposure_time == 2 ** stop``.
    """

    pixels: np.ndarray
    exposure_time: float
    exposure_stop: float = 0.0

    def __post_init__(self):
        if not self.exposure_time > 0:
            raise ValueError(f"exposure time must be positive, got {self.exposure_time}")
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("LDR pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class TriangleWeights:
    alpha_1: np.ndarray
    alpha_2: np.ndarray
    alpha_3: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.alpha_1, self.alpha_2, self.alpha_3])


@dataclass(frozen=True)
class ToneMapParams:
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


def _pixels(frame) -> np.ndarray:
    return np.asarray(frame.pixels if isinstance(frame, LdrFrame) else frame, dtype=np.float64)


def gamma_normalize(frame: LdrFrame, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Map an LDR frame into the linear HDR domain: ``pixels ** gamma / t``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return _pixels(frame) ** gamma / frame.exposure_time


def expose(radiance: np.ndarray, exposure_time: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Inverse of :func:`gamma_normalize`: render radiance as a clipped LDR image."""
    if not gamma > 0 or not exposure_time > 0:
        raise ValueError("gamma and exposure time must be positive")
    radiance = np.asarray(radiance, dtype=np.float64)
    if np.any(radiance < 0):
        raise ValueError("radiance must be non-negative")
    return np.clip((radiance * exposure_time) ** (1.0 / gamma), 0.0, 1.0)


def triangle_functions(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three piecewise-linear triangles with breakpoints at 0 and 1/2 and 1."""
    x = np.asarray(x, dtype=np.float64)
    lam1 = np.maximum(0.0, 1.0 - 2.0 * x)
    lam2 = 1.0 - np.abs(2.0 * x - 1.0)
    lam3 = np.maximum(0.0, 2.0 * x - 1.0)
    return lam1, lam2, lam3


def triangle_weights(reference) -> TriangleWeights:
    """Per-pixel blending weights computed from the mid exposure.

    The triangles are evaluated on the RGB mean so one weight triple is
    shared by all channels of a pixel.
    """
    px = _pixels(reference)
    if px.size and (px.min() < 0.0 or px.max() > 1.0):
        raise ValueError("reference pixels must lie in [0, 1]")
    x = px.mean(axis=-1) if px.ndim == 3 else px
    lam1, lam2, lam3 = triangle_functions(x)
    return TriangleWeights(1.0 - lam1, lam2, 1.0 - lam3)


def fuse_exposures(frames: Sequence[LdrFrame], gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Weighted mean of the gamma-normalized frames (short, mid, long)."""
    if len(frames) != 3:
        raise ValueError(f"expected 3 frames, got {len(frames)}")
    shapes = {np.shape(f.pixels) for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frame shapes differ: {sorted(shapes)}")
    times = [f.exposure_time for f in frames]
    if len(set(times)) != 3:
        raise ValueError(f"exposure times must be distinct, got {times}")

    w = triangle_weights(frames[1]).stack()[..., None]
    norm = np.stack([gamma_normalize(f, gamma) for f in frames])
    total = w.sum(axis=0)
    # alpha_1 + alpha_3 >= 1 everywhere, so the denominator never vanishes
    assert np.all(total > 0)
    return (w * norm).sum(axis=0) / total


def tonemap(h: np.ndarray, params: ToneMapParams | float = DEFAULT_MU) -> np.ndarray:
    """mu-law compression ``log(1 + mu h) / log(1 + mu)``."""
    mu = params.mu if isinstance(params, ToneMapParams) else float(params)
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("tone mapping expects non-negative input")
    return np.log1p(mu * h) / np.log1p(mu)


def inverse_tonemap(t: np.ndarray, mu: float = DEFAULT_MU) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.expm1(t * np.log1p(mu)) / mu


def normalize_peak(h: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale an HDR image so its maximum is 1. Returns the image and the peak."""
    h = np.asarray(h, dtype=np.float64)
    peak = float(h.max()) if h.size else 0.0
    if peak <= 0:
        return h.copy(), 1.0
    return h / peak, peak


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    r = len(kernel) // 2
    return out[r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel over the valid region and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 11:
        raise ValueError("SSIM needs images of at least 11x11 pixels")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window()
    scores = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def psnr_mu(pred: np.ndarray, gt: np.ndarray, mu: float = DEFAULT_MU) -> float:
    return psnr(tonemap(pred, mu), tonemap(gt, mu))


def ssim_mu(pred: np.ndarray, gt: np.ndarray, mu: float = DEFAULT_MU) -> float:
    return ssim(tonemap(pred, mu), tonemap(gt, mu))


def hdr_metrics(pred: np.ndarray, gt: np.ndarray, mu: float = DEFAULT_MU) -> dict[str, float]:
    """PSNR/SSIM on tone-mapped (``_mu``) and linear (``_l``) images."""
    return {
        "psnr_mu": psnr_mu(pred, gt, mu),
        "psnr_l": psnr(pred, gt),
        "ssim_mu": ssim_mu(pred, gt, mu),
        "ssim_l": ssim(pred, gt),
    }
