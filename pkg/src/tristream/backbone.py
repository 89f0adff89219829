"""Three parallel 3D ResNet pathways with Fast -> Slow -> Single lateral fusion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tn
from . import tensorfile
from .errors import ConfigError, InputError
from .heads import HEAD_KINDS
from .modules import ChannelNorm, Conv3d, Module
from .sampler import StrideTriple, pathway_indices, pathway_length
from .tensor import Tensor

PATHWAYS = ("single", "slow", "fast")
# fusion runs from the temporally densest pathway to the sparsest
FUSION_ORDER = ("fast", "slow", "single")


@dataclass
class PathwayConfig:
    name: str
    theta: int
    stage_channels: tuple
    temporal_kernel: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ConfigError(f"{self.name}: stage widths must be positive, got {self.stage_channels}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"{self.name}: temporal kernel must be odd and positive")


@dataclass
class NetworkConfig:
    strides: StrideTriple = field(default_factory=lambda: StrideTriple(8, 4, 2))
    clip_len: int = 8
    in_channels: int = 3
    slow_channels: tuple = (8, 16, 32, 64)
    single_channels: Optional[tuple] = None
    beta: float = 0.125
    blocks: int = 2
    temporal_kernels: dict = field(default_factory=lambda: {"single": 1, "slow": 3, "fast": 3})
    head: str = "attention"
    attn_heads: int = 4
    lstm_hidden: int = 48
    num_classes: int = 4
    pathways: tuple = PATHWAYS
    fusion_kernel: int = 5
    alpha_init: float = 1.0
    dilate_last: bool = False

    def __post_init__(self):
        if isinstance(self.strides, dict):
            self.strides = StrideTriple(**self.strides)
        elif not isinstance(self.strides, StrideTriple):
            self.strides = StrideTriple(*self.strides)
        self.slow_channels = tuple(self.slow_channels)
        if self.single_channels is not None:
            self.single_channels = tuple(self.single_channels)
        self.pathways = tuple(p for p in PATHWAYS if p in tuple(self.pathways))
        if not self.pathways:
            raise ConfigError("at least one pathway must be enabled")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"channel ratio beta must lie in (0, 1], got {self.beta}")
        if self.blocks < 1:
            raise ConfigError("need at least one residual block per stage")
        if self.clip_len < 1:
            raise ConfigError("clip_len must be positive")
        lengths = self.temporal_lengths()
        chain = [p for p in FUSION_ORDER if p in self.pathways]
        for donor, receiver in zip(chain[:-1], chain[1:]):
            if lengths[donor] % lengths[receiver]:
                raise ConfigError(
                    f"lateral {donor}->{receiver}: donor length {lengths[donor]} is not a multiple "
                    f"of receiver length {lengths[receiver]} (clip_len={self.clip_len}, strides={self.strides})"
                )
        if self.head == "attention" and self.feature_dim % self.attn_heads:
            raise ConfigError(f"feature dim {self.feature_dim} not divisible by {self.attn_heads} attention heads")

    def widths(self, name: str) -> tuple:
        if name == "fast":
            return tuple(max(1, int(round(c * self.beta))) for c in self.slow_channels)
        if name == "single" and self.single_channels is not None:
            return self.single_channels
        return self.slow_channels

    def pathway_config(self, name: str) -> PathwayConfig:
        return PathwayConfig(name, self.strides.for_pathway(name), self.widths(name), self.temporal_kernels[name])

    def temporal_lengths(self) -> dict:
        return {p: pathway_length(self.clip_len, self.strides.for_pathway(p)) for p in self.pathways}

    @property
    def seq_len(self) -> int:
        return max(self.temporal_lengths().values())

    @property
    def feature_dim(self) -> int:
        return sum(self.widths(p)[-1] for p in self.pathways)

    @property
    def num_stages(self) -> int:
        return len(self.slow_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = asdict(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["strides"] = StrideTriple(**d["strides"])
        return cls(**d)

    def replace(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


class ResidualBlock(Module):
    """conv-norm-relu-conv-norm plus (projected) shortcut, then relu."""

    def __init__(self, rng, c_in: int, c_out: int, kt: int, spatial_stride: int = 1, dilation: int = 1):
        pad = (kt // 2, dilation, dilation)
        self.conv1 = Conv3d(rng, c_in, c_out, (kt, 3, 3), (1, spatial_stride, spatial_stride), pad, (1, dilation, dilation))
        self.norm1 = ChannelNorm(c_out)
        self.conv2 = Conv3d(rng, c_out, c_out, (kt, 3, 3), 1, pad, (1, dilation, dilation))
        self.norm2 = ChannelNorm(c_out)
        self.proj = None
        if c_in != c_out or spatial_stride != 1:
            self.proj = Conv3d(rng, c_in, c_out, 1, (1, spatial_stride, spatial_stride))

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block(x, self)

    def macs(self, size):
        m1, out = self.conv1.macs(size)
        m2, _ = self.conv2.macs(out)
        m3 = self.proj.macs(size)[0] if self.proj is not None else 0
        return m1 + m2 + m3, out


def residual_block(x: Tensor, p: ResidualBlock) -> Tensor:
    y = tn.relu(p.norm1(p.conv1(x)))
    y = p.norm2(p.conv2(y))
    shortcut = p.proj(x) if p.proj is not None else x
    return tn.relu(tn.add(y, shortcut))


class Stem(Module):
    """conv (kt x 3 x 3) - norm - relu - max pool 1x2x2: the "pool1" output."""

    def __init__(self, rng, c_in: int, c_out: int, kt: int):
        self.conv = Conv3d(rng, c_in, c_out, (kt, 3, 3), 1, (kt // 2, 1, 1))
        self.norm = ChannelNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.maxpool3d(tn.relu(self.norm(self.conv(x))), (1, 2, 2))

    def macs(self, size):
        m, out = self.conv.macs(size)
        return m, (out[0], out[1] // 2, out[2] // 2)


class Pathway(Module):
    def __init__(self, rng, cfg: PathwayConfig, in_channels: int, blocks: int, dilate_last: bool = False):
        self.cfg = cfg
        widths = cfg.stage_channels
        kt = cfg.temporal_kernel
        self.stem = Stem(rng, in_channels, widths[0], kt)
        self.stages = []
        for s in range(1, len(widths)):
            last = s == len(widths) - 1
            stride, dil = (1, 2) if (last and dilate_last) else (2, 1)
            stage = [ResidualBlock(rng, widths[s - 1], widths[s], kt, stride, dil)]
            stage += [ResidualBlock(rng, widths[s], widths[s], kt, 1, dil) for _ in range(blocks - 1)]
            self.stages.append(stage)

    @property
    def num_stages(self) -> int:
        return 1 + len(self.stages)

    def run_stage(self, i: int, x: Tensor) -> Tensor:
        if i == 0:
            return self.stem(x)
        for block in self.stages[i - 1]:
            x = block(x)
        return x

    def macs(self, size) -> int:
        total, size = self.stem.macs(size)
        for stage in self.stages:
            for block in stage:
                m, size = block.macs(size)
                total += m
        return total


def min_spatial_extent(num_stages: int, dilate_last: bool = False) -> int:
    return 2 ** (num_stages - (1 if dilate_last else 0))


def run_pathway(x: Tensor, pathway: Pathway) -> list[Tensor]:
    """Stage outputs [pool1, res2, ...] of one pathway with no lateral input."""
    need = min_spatial_extent(pathway.num_stages)
    if min(x.shape[3:]) < need:
        raise InputError(f"spatial extent {x.shape[3:]} is below the total downsample factor {need}")
    feats = []
    for i in range(pathway.num_stages):
        x = pathway.run_stage(i, x)
        feats.append(x)
    return feats


class LateralFuse(Module):
    """Strided temporal conv + 1x1x1 channel projection, scaled by a learnable alpha."""

    def __init__(self, rng, c_donor: int, c_receiver: int, ratio: int, kernel: int = 5, alpha: float = 1.0):
        self.ratio = ratio
        self.temporal = Conv3d(rng, c_donor, c_donor, (kernel, 1, 1), (ratio, 1, 1), (kernel // 2, 0, 0))
        self.project = Conv3d(rng, c_donor, c_receiver, 1)
        self.alpha = tn.param(np.full((1,), alpha))

    def __call__(self, donor: Tensor, receiver: Tensor) -> Tensor:
        return lateral_fuse(donor, receiver, self)

    def macs(self, size) -> int:
        m1, out = self.temporal.macs(size)
        return m1 + self.project.macs(out)[0]


def lateral_fuse(donor: Tensor, receiver: Tensor, p: LateralFuse) -> Tensor:
    td, tr = donor.shape[2], receiver.shape[2]
    if td % tr or td // tr != p.ratio:
        raise ConfigError(f"lateral fusion expects donor length {p.ratio} x {tr}, got {td}")
    moved = p.project(p.temporal(donor))
    if moved.shape != receiver.shape:
        raise tn.ShapeError(f"lateral fusion produced {moved.shape}, receiver is {receiver.shape}")
    return tn.add(receiver, tn.scale(moved, p.alpha))


class Backbone(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pathways = {
            name: Pathway(rng, cfg.pathway_config(name), cfg.in_channels, cfg.blocks, cfg.dilate_last)
            for name in cfg.pathways
        }
        lengths = cfg.temporal_lengths()
        chain = [p for p in FUSION_ORDER if p in cfg.pathways]
        self.links = list(zip(chain[:-1], chain[1:]))
        # one fusion per link stage (all but the last) per donor/receiver pair
        self.fusions = {
            f"{d}_{r}": [
                LateralFuse(rng, cfg.widths(d)[s], cfg.widths(r)[s], lengths[d] // lengths[r],
                            cfg.fusion_kernel, cfg.alpha_init)
                for s in range(cfg.num_stages - 1)
            ]
            for d, r in self.links
        }

    def prepare(self, frames: np.ndarray) -> dict:
        """Split a (N, T, H, W, C) batch into per-pathway (N, C, T', H, W) tensors."""
        frames = np.asarray(frames)
        if frames.ndim == 4:
            frames = frames[None]
        n, T, H, W, C = frames.shape
        if T != self.cfg.clip_len:
            raise InputError(f"expected clips of {self.cfg.clip_len} frames, got {T}")
        if C != self.cfg.in_channels:
            raise InputError(f"expected {self.cfg.in_channels} channels, got {C}")
        need = min_spatial_extent(self.cfg.num_stages, self.cfg.dilate_last)
        if min(H, W) < need:
            raise InputError(f"spatial extent {H}x{W} is below the total downsample factor {need}")
        out = {}
        for name in self.cfg.pathways:
            idx = pathway_indices(T, self.cfg.strides.for_pathway(name))
            out[name] = Tensor(np.ascontiguousarray(frames[:, idx].transpose(0, 4, 1, 2, 3)))
        return out

    def forward_stages(self, inputs: dict) -> dict:
        """Final-stage feature map of every pathway, with lateral fusion applied."""
        x = dict(inputs)
        for s in range(self.cfg.num_stages):
            for name in FUSION_ORDER:
                if name in x:
                    x[name] = self.pathways[name].run_stage(s, x[name])
            if s < self.cfg.num_stages - 1:
                for d, r in self.links:
                    x[r] = self.fusions[f"{d}_{r}"][s](x[d], x[r])
        return x

    def __call__(self, frames) -> Tensor:
        return forward_backbone(frames, self)

    def macs(self, height: int, width: int) -> dict:
        """Per-sample multiply-accumulates by pathway, plus the lateral links."""
        out = {}
        lengths = self.cfg.temporal_lengths()
        for name, pw in self.pathways.items():
            out[name] = pw.macs((lengths[name], height, width))
        lateral = 0
        for d, r in self.links:
            h, w = height // 2, width // 2
            for s, fuse in enumerate(self.fusions[f"{d}_{r}"]):
                lateral += fuse.macs((lengths[d], h, w))
                h, w = h // 2, w // 2
        out["lateral"] = lateral
        return out


def align_to(seq: Tensor, length: int) -> Tensor:
    """Nearest-neighbour repeat of a (N, T, C) sequence along T to ``length`` steps."""
    t = seq.shape[1]
    if t == length:
        return seq
    idx = (np.arange(length) * t) // length
    return tn.take(seq, idx, axis=1)


def forward_backbone(frames, backbone: Backbone) -> Tensor:
    """Fused (N, T_seq, D) feature sequence: spatially pooled final stages, concatenated."""
    feats = backbone.forward_stages(backbone.prepare(frames))
    T = backbone.cfg.seq_len
    parts = []
    for name in backbone.cfg.pathways:
        f = tn.mean(feats[name], axis=(3, 4))  # (N, C, T_p)
        parts.append(align_to(tn.transpose(f, (0, 2, 1)), T))
    return tn.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints: directory of T3SR tensors plus manifest.json
# ---------------------------------------------------------------------------


def _file_name(param_name: str) -> str:
    return param_name.replace("/", "_") + ".t3sr"


def save_checkpoint(model: Module, config: dict, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = _file_name(name)
        tensorfile.save(path / fname, p.data)
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    manifest = {"format": "T3SR-checkpoint", "version": 1, "config": config, "parameters": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (state dict, config dict)."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise InputError(f"no checkpoint manifest in {path}") from exc
    state = {}
    for e in manifest["parameters"]:
        arr = tensorfile.load(path / e["file"])
        if list(arr.shape) != e["shape"]:
            raise InputError(f"{e['name']}: file shape {arr.shape} disagrees with manifest {e['shape']}")
        state[e["name"]] = arr
    return state, manifest["config"]
