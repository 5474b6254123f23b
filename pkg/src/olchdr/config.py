"""Run configuration documents for the command line.

A run config is a YAML (or JSON) mapping with optional sections ``synth``,
``olc`` and ``hdr`` whose keys are the fields of :class:`SynthConfig`,
:class:`OlcTrainConfig` and :class:`HdrTrainConfig`, plus a few top-level
keys::

    out_dir: runs/toy        # where checkpoints and resolved configs go
    seed: 0                  # default seed for every section
    device: cpu              # torch device for training
    threads: 1               # torch intra-op threads (1 = bit-reproducible)
    data: null               # scene directory; synthesize from `synth` when null
    scenes: 16               # number of synthetic scenes when `data` is null
    synth: {height: 32, width: 32, motion: 0}
    olc: {num_codes: 64, code_dim: 8, patch_size: 32, stride: 32, lambda_adv: 0}
    hdr: {base_channels: 8, ablation: full, patch_size: 32, stride: 32}

Unknown keys are rejected with their dotted path.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .autoencoder import OlcTrainConfig
from .datasets import SynthConfig
from .hdrnet.train import HdrTrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


SECTIONS = {"synth": SynthConfig, "olc": OlcTrainConfig, "hdr": HdrTrainConfig}
TOP_LEVEL = {"out_dir", "seed", "device", "threads", "data", "scenes", "quiet"} | set(SECTIONS)


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    device: str = "cpu"
    threads: int = 1
    data: str | None = None
    scenes: int = 16
    quiet: bool = False
    synth: SynthConfig = field(default_factory=SynthConfig)
    olc: OlcTrainConfig = field(default_factory=OlcTrainConfig)
    hdr: HdrTrainConfig = field(default_factory=HdrTrainConfig)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("out_dir", "seed", "device", "threads", "data", "scenes", "quiet")}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            if name == "synth":
                d["stops"] = list(d["stops"])
            if name == "hdr":
                # the preset has already been expanded into the individual flags
                d["ablation"] = None
            out[name] = d
        return out


def _coerce(path: str, value: Any, current: Any):
    """Light type check against the default value's type."""
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(float(v) for v in value)
    return value


def _build_section(name: str, raw: Any, seed: int, device: str):
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(name, "expected a mapping")
    defaults = cls.__dataclass_fields__
    kwargs = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        f = defaults[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(path, value, default)
    if "seed" in defaults and "seed" not in kwargs:
        kwargs["seed"] = seed
    if "device" in defaults and "device" not in kwargs:
        kwargs["device"] = device
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_config(doc: Mapping | None, overrides: Mapping | None = None) -> RunConfig:
    """Validate a config mapping; ``overrides`` (e.g. ``--seed``) win over the document."""
    doc = dict(doc or {})
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a mapping")
    for key in doc:
        if key not in TOP_LEVEL:
            raise ConfigError(str(key), "unknown key")
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    base = RunConfig()
    top = {}
    for key in ("out_dir", "seed", "device", "threads", "data", "scenes", "quiet"):
        if key in doc:
            top[key] = _coerce(key, doc[key], getattr(base, key))
    if top.get("threads", 1) < 1:
        raise ConfigError("threads", "must be at least 1")
    if top.get("scenes", 1) < 1:
        raise ConfigError("scenes", "must be at least 1")
    seed = top.get("seed", base.seed)
    device = top.get("device", base.device)
    sections = {name: _build_section(name, doc.get(name), seed, device) for name in SECTIONS}
    return RunConfig(**top, **sections)


def load_config(path: str | os.PathLike | None, overrides: Mapping | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text) if os.fspath(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("", f"cannot parse config {path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("", "config must be a mapping")
    return parse_config(doc, overrides)


def write_resolved(cfg: RunConfig, directory: str | os.PathLike, name: str = "resolved_config.yaml") -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path
