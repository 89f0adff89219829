"""Per-pathway temporal sampling and the train / inference crop protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C)
    fps: int = 30

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise InputError(f"clip frames must be (T, H, W, C), got shape {f.shape}")
        if f.shape[0] < 1:
            raise InputError("clip has no frames")
        if f.shape[3] not in (1, 3):
            raise InputError(f"clip must have 1 or 3 channels, got {f.shape[3]}")
        if int(self.fps) < 1:
            raise InputError(f"fps must be a positive integer, got {self.fps}")
        self.frames = f
        self.fps = int(self.fps)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class StrideTriple:
    theta1: int  # single
    theta2: int  # slow
    theta3: int  # fast

    def __post_init__(self):
        if min(self.theta1, self.theta2, self.theta3) < 1:
            raise ConfigError(f"strides must be >= 1, got {self}")
        if not self.theta3 < self.theta2 < self.theta1:
            raise ConfigError(
                f"strides must satisfy fast < slow < single, got "
                f"theta3={self.theta3}, theta2={self.theta2}, theta1={self.theta1}"
            )

    def for_pathway(self, name: str) -> int:
        return {"single": self.theta1, "slow": self.theta2, "fast": self.theta3}[name]


def pathway_indices(num_frames: int, theta: int) -> np.ndarray:
    if theta < 1:
        raise InputError(f"stride must be >= 1, got {theta}")
    if num_frames < 1:
        raise InputError("cannot sample an empty clip")
    return np.arange(0, num_frames, theta)


def pathway_length(num_frames: int, theta: int) -> int:
    return math.ceil(num_frames / theta)


def sample_pathway(clip, theta: int) -> np.ndarray:
    """Frames 0, theta, 2*theta, ... of the clip (or of a (T, ...) array)."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    return frames[pathway_indices(frames.shape[0], theta)]


def train_crop(frames: np.ndarray, crop: int, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    """Random crop x crop window plus a horizontal flip with probability ``flip_prob``.

    Draw order is fixed (row offset, column offset, flip) so a seeded run replays.
    """
    t, h, w, c = frames.shape
    if h < crop or w < crop:
        raise InputError(f"frames {h}x{w} are smaller than the {crop}x{crop} crop")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    flip = rng.random() < flip_prob
    out = frames[:, y:y + crop, x:x + crop]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def _bilinear_axis(n_in: int, n_out: int):
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo)


def resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (T, H, W, C) frames with half-pixel centres."""
    t, h, w, c = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()
    f = frames.astype(np.float64)
    y0, y1, ly = _bilinear_axis(h, out_h)
    x0, x1, lx = _bilinear_axis(w, out_w)
    rows = f[:, y0] * (1 - ly)[None, :, None, None] + f[:, y1] * ly[None, :, None, None]
    out = rows[:, :, x0] * (1 - lx)[None, None, :, None] + rows[:, :, x1] * lx[None, None, :, None]
    return out.astype(frames.dtype)


def resize_shorter_side(frames: np.ndarray, target: int) -> np.ndarray:
    t, h, w, c = frames.shape
    if min(h, w) == target:
        return frames.copy()
    if h <= w:
        return resize(frames, target, max(1, round(w * target / h)))
    return resize(frames, max(1, round(h * target / w)), target)


def three_crop_offsets(long_side: int, crop: int) -> list[int]:
    """Start, centre and end placements along the longer side."""
    return [0, (long_side - crop) // 2, long_side - crop]


def inference_clips(video: VideoClip, n_clips: int, crop: int, clip_len: Optional[int] = None) -> list[VideoClip]:
    """``n_clips`` uniformly spaced temporal windows x 3 spatial crops (clip-major order)."""
    T = video.num_frames
    clip_len = T if clip_len is None else clip_len
    if n_clips < 1:
        raise InputError("need at least one clip")
    if clip_len > T:
        raise InputError(f"video has {T} frames, fewer than the clip length {clip_len}")
    starts = np.round(np.linspace(0, T - clip_len, n_clips)).astype(int) if n_clips > 1 else [0]
    out = []
    for s in starts:
        frames = resize_shorter_side(video.frames[s:s + clip_len], crop)
        _, h, w, _ = frames.shape
        if h <= w:
            crops = [frames[:, :crop, x:x + crop] for x in three_crop_offsets(w, crop)]
        else:
            crops = [frames[:, y:y + crop, :crop] for y in three_crop_offsets(h, crop)]
        out.extend(VideoClip(np.ascontiguousarray(c), video.fps) for c in crops)
    return out


# ---------------------------------------------------------------------------
# dataset manifest: one tab-separated record per line: path, fps, target
# target is an integer label id or a reference to a box-annotation file
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: str
    fps: int
    label: Optional[int] = None
    boxes: Optional[str] = None


def write_manifest(path, records: list[ManifestRecord]) -> None:
    lines = []
    for r in records:
        target = str(r.label) if r.label is not None else r.boxes
        if target is None:
            raise InputError(f"record {r.path} has neither a label nor a box reference")
        lines.append(f"{r.path}\t{r.fps}\t{target}\n")
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[ManifestRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        clip, fps, target = parts
        try:
            fps_i = int(fps)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad fps {fps!r}") from exc
        if target.lstrip("-").isdigit():
            out.append(ManifestRecord(clip, fps_i, label=int(target)))
        else:
            out.append(ManifestRecord(clip, fps_i, boxes=target))
    return out
