"""Scene ingestion, synthetic exposure brackets, patch extraction and
dihedral augmentation.

On-disk scene layout (also emitted by the synthetic writer)::

    {scene}/input_1.tif, input_2.tif, input_3.tif   short -> long, 16-bit RGB
    {scene}/exposure.txt                             one log2 stop per line
    {scene}/gt.hdr                                   optional Radiance ground truth

Exposure times are ``2 ** stop``. Ground truth is peak-normalized on load.
"""
from __future__ import annotations

import glob
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import tifffile
from scipy import ndimage

from .hdrio import read_exr, read_hdr, write_hdr
from .radiometry import DEFAULT_GAMMA, LdrFrame, expose, normalize_peak


class SceneLoadError(ValueError):
    pass


@dataclass(frozen=True)
class ExposureStack:
    frames: tuple[LdrFrame, LdrFrame, LdrFrame]
    scene_id: str = ""
    reference_index: int = 2  # 1-based: the mid exposure

    def __post_init__(self):
        if len(self.frames) != 3:
            raise ValueError("an exposure stack holds exactly three frames")
        times = [f.exposure_time for f in self.frames]
        if not times[0] < times[1] < times[2]:
            raise ValueError(f"exposure times must be strictly increasing, got {times}")
        shapes = {f.pixels.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"frames differ in shape: {sorted(shapes)}")

    @property
    def times(self) -> np.ndarray:
        return np.array([f.exposure_time for f in self.frames])

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].pixels.shape[:2]

    def pixels(self) -> np.ndarray:
        """(3, H, W, 3) array of the frames."""
        return np.stack([f.pixels for f in self.frames])


@dataclass(frozen=True)
class Scene:
    stack: ExposureStack
    ground_truth: np.ndarray | None = None

    @property
    def scene_id(self) -> str:
        return self.stack.scene_id


@dataclass(frozen=True)
class SynthConfig:
    """Procedural scene parameters.

    ``exposure_offset`` is log2 of the reference exposure time, so frame ``i``
    is exposed for ``2 ** (exposure_offset + stops[i])``. ``saturation_fraction``
    is the fraction of long-exposure values driven to 1.0. ``motion`` is the
    integer translation (pixels) applied to each non-reference frame in a
    random compass direction.
    """

    height: int = 64
    width: int = 64
    stops: tuple[float, float, float] = (-2.0, 0.0, 2.0)
    exposure_offset: float = 1.0
    motion: int = 0
    saturation_fraction: float = 0.1
    noise: float = 0.0
    gamma: float = DEFAULT_GAMMA
    smoothness: float = 6.0
    highlights: int = 3
    min_radiance: float = 1.0 / 512

    def __post_init__(self):
        if self.height % 8 or self.width % 8 or self.height <= 0 or self.width <= 0:
            raise ValueError("synthetic image size must be a positive multiple of 8")
        if len(self.stops) != 3 or not self.stops[0] < self.stops[1] < self.stops[2]:
            raise ValueError(f"stops must be three strictly increasing values, got {self.stops}")
        if not 0.0 <= self.saturation_fraction < 1.0:
            raise ValueError("saturation_fraction must lie in [0, 1)")
        if self.motion < 0 or self.noise < 0:
            raise ValueError("motion and noise must be non-negative")
        if not 0 < self.min_radiance < 1:
            raise ValueError("min_radiance must lie in (0, 1)")

    @property
    def exposure_times(self) -> tuple[float, float, float]:
        return tuple(2.0 ** (self.exposure_offset + s) for s in self.stops)


# -- synthetic scenes -------------------------------------------------------

_DIRECTIONS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _brightness(cfg: SynthConfig, rng: np.random.Generator, shape) -> np.ndarray:
    """Smooth RGB field in [0, 1] with peak exactly 1."""
    h, w = shape
    lum = _smooth_field(rng, (h, w), cfg.smoothness)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(cfg.highlights):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.04, 0.12) * min(h, w)
        lum = lum + rng.uniform(0.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    tint = np.stack([_smooth_field(rng, (h, w), 2 * cfg.smoothness) for _ in range(3)], axis=-1)
    rgb = lum[..., None] * (0.55 + 0.45 * tint)
    return rgb / rgb.max()


def _log_range(g: np.ndarray, cfg: SynthConfig) -> float:
    """Log of the darkest radiance, so that radiance = exp(lo * (1 - g)).

    When saturation is requested the range is chosen so that exactly the top
    ``saturation_fraction`` of values reach ``1 / t_long``; otherwise it is
    set by ``min_radiance``.
    """
    t_long = cfg.exposure_times[2]
    if cfg.saturation_fraction > 0 and t_long > 1:
        q = float(np.quantile(g, 1.0 - cfg.saturation_fraction))
        if q < 1:
            return -math.log(t_long) / (1.0 - q)
    return math.log(cfg.min_radiance)


def synth_scene(cfg: SynthConfig, seed: int, scene_id: str | None = None) -> Scene:
    """Render a random scene: smooth radiance with highlights, exposed three
    times, non-reference frames optionally translated. Pure in (cfg, seed)."""
    rng = np.random.default_rng(seed)
    m = cfg.motion
    canvas = (cfg.height + 2 * m, cfg.width + 2 * m)
    g = _brightness(cfg, rng, canvas)
    radiance = np.exp(_log_range(g, cfg) * (1.0 - g))

    def crop(dy=0, dx=0):
        return radiance[m + dy:m + dy + cfg.height, m + dx:m + dx + cfg.width]

    gt = crop()
    frames = []
    for i, (stop, t) in enumerate(zip(cfg.stops, cfg.exposure_times)):
        dy = dx = 0
        if i != 1 and m:
            dy, dx = _DIRECTIONS[int(rng.integers(len(_DIRECTIONS)))]
            dy, dx = dy * m, dx * m
        ldr = expose(crop(dy, dx), t, cfg.gamma)
        if cfg.noise:
            ldr = np.clip(ldr + rng.normal(0.0, cfg.noise, ldr.shape), 0.0, 1.0)
        frames.append(LdrFrame(ldr, t, cfg.exposure_offset + stop))
    sid = scene_id if scene_id is not None else f"synth_{seed:06d}"
    return Scene(ExposureStack(tuple(frames), sid), gt)


def synth_dataset(cfg: SynthConfig, count: int, seed: int = 0) -> list[Scene]:
    return [synth_scene(cfg, seed * 100_003 + i, f"synth_{seed}_{i:04d}") for i in range(count)]


# -- disk I/O ---------------------------------------------------------------

def _read_ldr(path: str) -> np.ndarray:
    try:
        img = tifffile.imread(path)
    except Exception as exc:  # tifffile raises a variety of types
        raise SceneLoadError(f"{path}: cannot read TIFF ({exc})") from exc
    if img.ndim != 3 or img.shape[-1] < 3:
        raise SceneLoadError(f"{path}: expected an RGB image, got shape {img.shape}")
    img = img[..., :3]
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / np.iinfo(img.dtype).max
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def _read_stops(path: str) -> list[float]:
    try:
        with open(path) as fh:
            tokens = fh.read().split()
        stops = [float(tok.replace("−", "-")) for tok in tokens]
    except (OSError, ValueError) as exc:
        raise SceneLoadError(f"{path}: cannot parse exposure stops ({exc})") from exc
    if len(stops) != 3:
        raise SceneLoadError(f"{path}: expected 3 stops, found {len(stops)}")
    if not stops[0] < stops[1] < stops[2]:
        raise SceneLoadError(f"{path}: stops must be strictly increasing, got {stops}")
    return stops


def _find_inputs(dir_path: str) -> list[str]:
    named = [os.path.join(dir_path, f"input_{i}.tif") for i in (1, 2, 3)]
    if all(os.path.isfile(p) for p in named):
        return named
    # Kalantari's original release names frames by capture id; order is short -> long
    tifs = sorted(glob.glob(os.path.join(dir_path, "*.tif")))
    if len(tifs) == 3:
        return tifs
    missing = [os.path.basename(p) for p in named if not os.path.isfile(p)]
    raise SceneLoadError(f"{dir_path}: missing LDR inputs {missing}")


def _find_gt(dir_path: str) -> str | None:
    for name in ("gt.hdr", "HDRImg.hdr", "gt.exr"):
        p = os.path.join(dir_path, name)
        if os.path.isfile(p):
            return p
    return None


def load_scene(dir_path: str | os.PathLike) -> Scene:
    dir_path = os.fspath(dir_path)
    if not os.path.isdir(dir_path):
        raise SceneLoadError(f"{dir_path}: not a directory")
    stops_path = os.path.join(dir_path, "exposure.txt")
    if not os.path.isfile(stops_path):
        raise SceneLoadError(f"{dir_path}: missing exposure.txt")
    stops = _read_stops(stops_path)
    images = [_read_ldr(p) for p in _find_inputs(dir_path)]
    if len({im.shape for im in images}) != 1:
        raise SceneLoadError(f"{dir_path}: LDR frames differ in size {[im.shape for im in images]}")
    frames = tuple(LdrFrame(im, 2.0 ** s, s) for im, s in zip(images, stops))

    gt = None
    gt_path = _find_gt(dir_path)
    if gt_path is not None:
        raw = read_exr(gt_path) if gt_path.endswith(".exr") else read_hdr(gt_path)
        if raw.shape != images[0].shape:
            raise SceneLoadError(f"{gt_path}: size {raw.shape} does not match LDR {images[0].shape}")
        gt, _ = normalize_peak(raw)
    return Scene(ExposureStack(frames, os.path.basename(os.path.normpath(dir_path))), gt)


def _format_stop(s: float) -> str:
    return str(int(s)) if float(s).is_integer() else repr(float(s))


def write_scene(scene: Scene, dir_path: str | os.PathLike) -> None:
    os.makedirs(dir_path, exist_ok=True)
    for i, frame in enumerate(scene.stack.frames, start=1):
        px = np.round(np.clip(frame.pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
        tifffile.imwrite(os.path.join(dir_path, f"input_{i}.tif"), px, photometric="rgb")
    with open(os.path.join(dir_path, "exposure.txt"), "w") as fh:
        for frame in scene.stack.frames:
            fh.write(_format_stop(math.log2(frame.exposure_time)) + "\n")
    if scene.ground_truth is not None:
        write_hdr(os.path.join(dir_path, "gt.hdr"), scene.ground_truth)


def list_scene_dirs(root: str | os.PathLike) -> list[str]:
    root = os.fspath(root)
    if os.path.isfile(os.path.join(root, "exposure.txt")):
        return [root]
    dirs = sorted(d for d in glob.glob(os.path.join(root, "*"))
                  if os.path.isfile(os.path.join(d, "exposure.txt")))
    if not dirs:
        raise SceneLoadError(f"{root}: no scene directories found")
    return dirs


def load_dataset(root: str | os.PathLike) -> list[Scene]:
    return [load_scene(d) for d in list_scene_dirs(root)]


def write_dataset(scenes: Sequence[Scene], root: str | os.PathLike) -> list[str]:
    paths = []
    for scene in scenes:
        p = os.path.join(root, scene.scene_id or f"scene_{len(paths):04d}")
        write_scene(scene, p)
        paths.append(p)
    return paths


# -- patches and augmentation ----------------------------------------------

@dataclass(frozen=True)
class Example:
    """A training crop: LDR frames (3, h, w, 3), exposure times, optional HDR."""

    ldr: np.ndarray
    times: np.ndarray
    hdr: np.ndarray | None
    scene_id: str = ""
    origin: tuple[int, int] = (0, 0)
    extra: dict = field(default_factory=dict)


def patch_origins(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if height < size or width < size:
        raise ValueError(f"scene {height}x{width} is smaller than patch size {size}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    ys = range(0, height - size + 1, stride)
    xs = range(0, width - size + 1, stride)
    return [(y, x) for y in ys for x in xs]


def patchify(scene: Scene, size: int = 256, stride: int = 64) -> list[Example]:
    """Congruent crops of every frame and the ground truth."""
    ldr = scene.stack.pixels()
    times = scene.stack.times
    out = []
    for y, x in patch_origins(*scene.stack.shape, size, stride):
        hdr = None if scene.ground_truth is None else scene.ground_truth[y:y + size, x:x + size]
        out.append(Example(ldr[:, y:y + size, x:x + size], times, hdr, scene.scene_id, (y, x)))
    return out


def dihedral(img: np.ndarray, k: int, axes=(0, 1)) -> np.ndarray:
    """One of the 8 symmetries of the square: ``k % 4`` quarter turns, flipped if ``k >= 4``."""
    out = np.rot90(img, k % 4, axes=axes)
    if k >= 4:
        out = np.flip(out, axis=axes[1])
    return np.ascontiguousarray(out)


def augment(example: Example, rng: np.random.Generator) -> Example:
    k = int(rng.integers(8))
    hdr = None if example.hdr is None else dihedral(example.hdr, k)
    return replace(example, ldr=dihedral(example.ldr, k, axes=(1, 2)), hdr=hdr)


def iter_patches(scenes: Sequence[Scene], size: int, stride: int) -> Iterator[Example]:
    for scene in scenes:
        yield from patchify(scene, size, stride)
