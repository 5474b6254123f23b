"""Radiance RGBE (.hdr) reading and writing, plus optional OpenEXR reading."""
from __future__ import annotations

import os
import re

import numpy as np

_SIZE_RE = re.compile(rb"^([-+])Y\s+(\d+)\s+([-+])X\s+(\d+)\s*$")


def _float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.maximum(np.asarray(rgb, dtype=np.float64), 0.0)
    brightest = rgb.max(axis=-1)
    mantissa, exponent = np.frexp(brightest)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    valid = brightest > 1e-32
    scale = np.where(valid, mantissa * 256.0 / np.where(valid, brightest, 1.0), 0.0)
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(valid, np.clip(exponent + 128, 0, 255), 0).astype(np.uint8)
    return out


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    rgbe = rgbe.astype(np.int32)
    e = rgbe[..., 3]
    scale = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    # half-step offset reconstructs the centre of the quantization bin
    rgb = (rgbe[..., :3] + 0.5) * scale[..., None]
    return np.where(e[..., None] > 0, rgb, 0.0).astype(np.float32)


def write_hdr(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W, 3) non-negative float image as uncompressed Radiance RGBE."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("HDR image contains non-finite values")
    h, w, _ = image.shape
    header = (b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\nEXPOSURE=1.0\n\n"
              + f"-Y {h} +X {w}\n".encode())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_float_to_rgbe(image).tobytes())


def _read_rle_scanline(buf: memoryview, pos: int, width: int) -> tuple[np.ndarray, int]:
    line = np.empty((4, width), dtype=np.uint8)
    for c in range(4):
        i = 0
        while i < width:
            count = buf[pos]
            pos += 1
            if count > 128:
                count -= 128
                line[c, i:i + count] = buf[pos]
                pos += 1
            else:
                if count == 0:
                    raise ValueError("corrupt RLE scanline")
                line[c, i:i + count] = np.frombuffer(buf[pos:pos + count], dtype=np.uint8)
                pos += count
            i += count
    return line.T, pos


def read_hdr(path: str | os.PathLike) -> np.ndarray:
    """Read a Radiance RGBE file (flat or new-style RLE) into float32 (H, W, 3)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise ValueError(f"{path}: not a Radiance HDR file")
    pos = 0
    fmt = None
    while True:
        end = data.index(b"\n", pos)
        line = data[pos:end]
        pos = end + 1
        if not line.strip():
            break
        if line.startswith(b"FORMAT="):
            fmt = line[7:].strip()
    if fmt not in (None, b"32-bit_rle_rgbe"):
        raise ValueError(f"{path}: unsupported pixel format {fmt!r}")
    end = data.index(b"\n", pos)
    m = _SIZE_RE.match(data[pos:end])
    pos = end + 1
    if not m or m.group(1) != b"-" or m.group(3) != b"+":
        raise ValueError(f"{path}: unsupported resolution line")
    h, w = int(m.group(2)), int(m.group(4))

    buf = memoryview(data)
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    for y in range(h):
        rle = (8 <= w < 32768 and pos + 4 <= len(data)
               and data[pos] == 2 and data[pos + 1] == 2 and not data[pos + 2] & 0x80)
        if rle:
            if (data[pos + 2] << 8 | data[pos + 3]) != w:
                raise ValueError(f"{path}: scanline width mismatch")
            rgbe[y], pos = _read_rle_scanline(buf, pos + 4, w)
        else:
            chunk = data[pos:pos + 4 * w]
            if len(chunk) != 4 * w:
                raise ValueError(f"{path}: truncated pixel data")
            rgbe[y] = np.frombuffer(chunk, dtype=np.uint8).reshape(w, 4)
            pos += 4 * w
    return _rgbe_to_float(rgbe)


def read_exr(path: str | os.PathLike) -> np.ndarray:
    try:
        import OpenEXR
        import Imath
    except ImportError as exc:
        raise RuntimeError(f"{path}: reading OpenEXR needs the OpenEXR package") from exc
    f = OpenEXR.InputFile(str(path))
    dw = f.header()["dataWindow"]
    w, h = dw.max.x - dw.min.x + 1, dw.max.y - dw.min.y + 1
    pt = Imath.PixelType(Imath.PixelType.FLOAT)
    chans = [np.frombuffer(f.channel(c, pt), dtype=np.float32) for c in "RGB"]
    return np.dstack(chans).reshape(h, w, 3)
