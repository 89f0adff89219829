"""Plain-text ``key = value`` run configuration with dotted keys.

Every recognised key and its default lives in ``DEFAULTS``; the default's type
decides how a value string is parsed.  Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional

from .backbone import NetworkConfig
from .errors import ConfigError
from .sampler import StrideTriple
from .trainer import SyntheticSpec, TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    # synthetic data
    "data.dir": "",
    "data.num_train": 2000,
    "data.num_test": 500,
    "data.num_classes": 4,
    "data.frames": 8,
    "data.size": 32,
    "data.object_size": 4,
    "data.speed": 1,
    "data.noise": 0.1,
    "data.channels": 1,
    "data.fps": 30,
    # network
    "model.theta1": 8,
    "model.theta2": 4,
    "model.theta3": 2,
    "model.slow_channels": (8, 16, 32, 32),
    "model.beta": 0.5,
    "model.blocks": 1,
    "model.head": "attention",
    "model.attn_heads": 4,
    "model.lstm_hidden": 48,
    "model.pathways": ("single", "slow", "fast"),
    "model.fusion_kernel": 5,
    "model.alpha_init": 1.0,
    # optimisation
    "train.lr": 0.005,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-5,
    "train.dropout": 0.5,
    "train.batch_size": 8,
    "train.epochs": 5,
    "train.crop": 0,
    "train.flip_prob": 0.0,
    # evaluation / inference
    "eval.checkpoint": "",
    "eval.split": "test",
    "eval.n_clips": 1,
    # detection
    "detect.num_train": 24,
    "detect.roi_size": 7,
    "detect.epochs": 60,
    "detect.lr": 0.01,
    "detect.batch_size": 8,
    "detect.checkpoint": "",
    # ablation grid
    "ablate.theta2": (4, 6, 12, 16, 32),
    "ablate.heads": ("bilstm", "attention", "none"),
    "ablate.betas": (1.0, 0.25, 0.125),
    "ablate.clip_len": 48,
    "ablate.theta1": 48,
    "ablate.theta3": 2,
    "ablate.base_theta2": 16,
    "ablate.base_head": "attention",
    "ablate.base_beta": 0.125,
    "ablate.size": 24,
    "ablate.num_train": 256,
    "ablate.num_test": 128,
    "ablate.epochs": 4,
    # gradient checks
    "gradcheck.instances": 20,
}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load(path: Optional[str] = None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    raw = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        raw.update(parse_lines(p.read_text().splitlines(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(DEFAULTS)
    for k, v in raw.items():
        cfg[k] = _parse(k, v)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def dumps(cfg: dict) -> str:
    lines = []
    for k in DEFAULTS:
        v = cfg[k]
        text = ",".join(str(i) for i in v) if isinstance(v, tuple) else str(v)
        lines.append(f"{k} = {text}\n")
    return "".join(lines)


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(
        num_classes=cfg["data.num_classes"], frames=cfg["data.frames"], size=cfg["data.size"],
        object_size=cfg["data.object_size"], speed=cfg["data.speed"], noise=cfg["data.noise"],
        channels=cfg["data.channels"], fps=cfg["data.fps"],
    )


def network_config(cfg: dict, **changes) -> NetworkConfig:
    kw = dict(
        strides=StrideTriple(cfg["model.theta1"], cfg["model.theta2"], cfg["model.theta3"]),
        clip_len=cfg["data.frames"],
        in_channels=cfg["data.channels"],
        slow_channels=cfg["model.slow_channels"],
        beta=cfg["model.beta"],
        blocks=cfg["model.blocks"],
        head=cfg["model.head"],
        attn_heads=cfg["model.attn_heads"],
        lstm_hidden=cfg["model.lstm_hidden"],
        num_classes=cfg["data.num_classes"],
        pathways=cfg["model.pathways"],
        fusion_kernel=cfg["model.fusion_kernel"],
        alpha_init=cfg["model.alpha_init"],
    )
    kw.update(changes)
    return NetworkConfig(**kw)


def train_config(cfg: dict, **changes) -> TrainConfig:
    kw = dict(
        lr=cfg["train.lr"], momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"],
        dropout_p=cfg["train.dropout"], batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
        seed=cfg["seed"], crop=cfg["train.crop"], flip_prob=cfg["train.flip_prob"],
    )
    kw.update(changes)
    return TrainConfig(**kw)
