"""Checkpoint directories: ``manifest.json`` + one ``.pt`` blob per module +
the raw codebook blob. Writes are atomic (temp directory, then rename)."""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from typing import Any, Mapping

import torch

from .codebook import load_codebook, save_codebook

FORMAT = "olchdr-checkpoint/1"


class CheckpointError(RuntimeError):
    """Missing, malformed or architecturally incompatible checkpoint."""


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def save_checkpoint(path: str | os.PathLike, kind: str, config: Mapping[str, Any], step: int,
                    seed: int, modules: Mapping[str, torch.nn.Module], codebook=None,
                    metrics: Mapping[str, Any] | None = None) -> str:
    path = os.path.abspath(os.fspath(path))
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        for name, module in modules.items():
            torch.save(module.state_dict(), os.path.join(tmp, f"{name}.pt"))
        if codebook is not None:
            save_codebook(tmp, codebook.vectors, getattr(codebook, "seed", None))
        manifest = {
            "format": FORMAT,
            "kind": kind,
            "step": step,
            "seed": seed,
            "config": _jsonable(dict(config)),
            "metrics": _jsonable(dict(metrics or {})),
            "modules": sorted(modules),
            "codebook": codebook is not None,
        }
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if os.path.exists(path):
            old = path + ".old"
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.isfile(mpath):
        raise CheckpointError(f"{path}: not a checkpoint (no manifest.json)")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_state(path: str | os.PathLike, name: str) -> dict:
    p = os.path.join(path, f"{name}.pt")
    if not os.path.isfile(p):
        raise CheckpointError(f"{path}: missing weights for {name!r}")
    return torch.load(p, map_location="cpu", weights_only=True)


def load_codebook_tensor(path: str | os.PathLike) -> tuple[torch.Tensor, dict]:
    try:
        vectors, meta = load_codebook(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot read codebook ({exc})") from exc
    return torch.from_numpy(vectors), meta
