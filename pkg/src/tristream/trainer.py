"""SGD training, clip/crop-averaged inference, and the synthetic motion datasets."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tn
from .backbone import save_checkpoint
from .detector import ActionDetector, BoxAnnotation
from .errors import InputError, NumericalError
from .metrics import topk_accuracy
from .modules import Module
from .sampler import ManifestRecord, VideoClip, inference_clips, train_crop, write_manifest
from . import tensorfile

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    dropout_p: float = 0.5
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    crop: int = 0  # 0: train on full frames
    flip_prob: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise InputError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InputError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")


def sgd_step(params, grads, velocity, cfg: TrainConfig):
    """Momentum SGD with coupled weight decay, in place.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            g = 0.0
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= cfg.lr * v
    return params, velocity


@dataclass
class EpochLog:
    epoch: int
    loss: float
    top1: float
    top5: float


def write_epoch_csv(path, rows: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "top1", "top5"])
        for r in rows:
            w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.top1:.6f}", f"{r.top5:.6f}"])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _augment(frames: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.crop:
        return frames
    return np.stack([train_crop(f, cfg.crop, rng, cfg.flip_prob) for f in frames])


class Trainer:
    """Owns the optimiser state for one model."""

    def __init__(self, model: Module, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.params = model.parameters()
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        if hasattr(model, "dropout_p"):
            model.dropout_p = cfg.dropout_p

    def step(self, loss_fn) -> float:
        """One forward/backward/update; ``loss_fn()`` builds the scalar loss."""
        self.model.train()
        snapshot = [p.data.copy() for p in self.params]
        try:
            loss = loss_fn()
            self.model.zero_grad()
            loss.backward()
            val = loss.item()
            if not np.isfinite(val):
                raise tn.NonFiniteError("loss is not finite")
            sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity, self.cfg)
            for p in self.params:
                if not np.isfinite(p.data).all():
                    raise tn.NonFiniteError("parameters diverged")
        except tn.NonFiniteError as exc:
            for p, s in zip(self.params, snapshot):
                p.data = s
            raise NumericalError(f"training diverged: {exc}") from exc
        return val


def train(model: Module, frames: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          checkpoint_dir=None, config_dict: Optional[dict] = None,
          eval_fn=None) -> list[EpochLog]:
    """Cross-entropy training on a labelled clip array.

    ``eval_fn(model, epoch)`` runs after each epoch (e.g. to record test accuracy);
    a truthy return value ends training early.
    On divergence the last good parameters are checkpointed before raising.
    """
    trainer = Trainer(model, cfg)
    history = []
    labels = np.asarray(labels)
    for epoch in range(1, cfg.epochs + 1):
        losses, seen = [], []
        scores = []
        for idx in _batches(len(labels), cfg.batch_size, trainer.rng):
            x = _augment(frames[idx], cfg, trainer.rng)
            y = labels[idx]
            holder = {}

            def loss_fn():
                logits = model(x, trainer.rng)
                holder["logits"] = logits.data
                return tn.cross_entropy(logits, y)

            try:
                loss = trainer.step(loss_fn)
            except NumericalError:
                if checkpoint_dir is not None:
                    save_checkpoint(model, config_dict or {}, checkpoint_dir)
                raise
            losses.append(loss * len(idx))
            seen.append(y)
            scores.append(holder["logits"])
        y_all = np.concatenate(seen)
        s_all = np.concatenate(scores)
        k5 = min(5, s_all.shape[1])
        row = EpochLog(epoch, float(np.sum(losses) / len(y_all)), topk_accuracy(s_all, y_all, 1), topk_accuracy(s_all, y_all, k5))
        history.append(row)
        log.info("epoch %d loss %.4f top1 %.3f", epoch, row.loss, row.top1)
        if eval_fn is not None and eval_fn(model, epoch):
            break
    if checkpoint_dir is not None:
        save_checkpoint(model, config_dict or {}, checkpoint_dir)
    return history


def predict_logits(model: Module, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a (N, T, H, W, C) array, single view per clip."""
    was = model.training
    model.eval()
    out = []
    try:
        with tn.no_grad():
            for i in range(0, len(frames), batch_size):
                out.append(model(frames[i:i + batch_size]).data)
    finally:
        model.train(was)
    return np.concatenate(out).astype(np.float64)


def accuracy(model: Module, frames: np.ndarray, labels: np.ndarray) -> float:
    return topk_accuracy(predict_logits(model, frames), labels, 1)


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def infer(model: Module, video: VideoClip, n_clips: int = 10, crop: Optional[int] = None) -> np.ndarray:
    """Class probabilities averaged over ``n_clips`` x 3 crops."""
    cfg = model.cfg
    crop = crop or min(video.frames.shape[1:3])
    views = inference_clips(video, n_clips, crop, clip_len=cfg.clip_len)
    batch = np.stack([v.frames for v in views])
    probs = softmax_np(predict_logits(model, batch))
    return probs.mean(axis=0)


# ---------------------------------------------------------------------------
# synthetic motion data
# ---------------------------------------------------------------------------

DIRECTIONS = {
    2: [(0, -1), (0, 1)],
    4: [(-1, 0), (1, 0), (0, -1), (0, 1)],  # up, down, left, right as (dy, dx)
    8: [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)],
}


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    frames: int = 8
    size: int = 32
    object_size: int = 4
    speed: int = 1
    noise: float = 0.1
    channels: int = 1
    fps: int = 30

    def __post_init__(self):
        if self.num_classes not in DIRECTIONS:
            raise InputError(f"num_classes must be one of {sorted(DIRECTIONS)}, got {self.num_classes}")
        if self.speed <= 0:
            raise InputError("speed must be positive; a static object makes every class identical")
        if self.channels not in (1, 3):
            raise InputError("channels must be 1 or 3")
        if self.start_range()[1] < self.start_range()[0]:
            raise InputError(
                f"object of size {self.object_size} moving {self.speed} px/frame for {self.frames} frames "
                f"does not stay inside a {self.size}px frame"
            )

    def start_range(self) -> tuple[int, int]:
        # same start window for every class, so frame 0 carries no label information
        m = self.speed * (self.frames - 1)
        return m, self.size - self.object_size - m


@dataclass
class LabeledClips:
    frames: np.ndarray  # (N, T, H, W, C) float32
    labels: np.ndarray
    fps: int = 30

    def __len__(self):
        return len(self.labels)

    def clip(self, i: int) -> VideoClip:
        return VideoClip(self.frames[i], self.fps)


def _render(spec: SyntheticSpec, y0: int, x0: int, dy: int, dx: int, rng, canvas=None) -> np.ndarray:
    T, S, o = spec.frames, spec.size, spec.object_size
    if canvas is None:
        canvas = (rng.standard_normal((T, S, S, spec.channels)) * spec.noise).astype(np.float32)
    for t in range(T):
        y, x = y0 + dy * spec.speed * t, x0 + dx * spec.speed * t
        canvas[t, y:y + o, x:x + o] = 1.0
    return canvas


def gen_synthetic(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> LabeledClips:
    """Bright square moving in one of ``num_classes`` directions over Gaussian noise."""
    lo, hi = spec.start_range()
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    frames = np.empty((n, spec.frames, spec.size, spec.size, spec.channels), dtype=np.float32)
    dirs = DIRECTIONS[spec.num_classes]
    for i, lab in enumerate(labels):
        y0, x0 = rng.integers(lo, hi + 1, size=2)
        dy, dx = dirs[lab]
        frames[i] = _render(spec, int(y0), int(x0), dy, dx, rng)
    return LabeledClips(frames, labels.astype(np.int64), spec.fps)


@dataclass
class DetectionClips:
    frames: np.ndarray
    boxes: list  # per clip: list of BoxAnnotation
    fps: int = 30


def gen_detection(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> DetectionClips:
    """Two moving squares per clip (left and right half), labelled by direction.

    Each ground-truth box is the bounding box of that square's trajectory.
    """
    T, S, o, v = spec.frames, spec.size, spec.object_size, spec.speed
    half = S // 2
    travel = v * (T - 1)
    if o + travel > half:
        raise InputError(f"a {o}px object moving {travel}px does not fit in half of a {S}px frame")
    dirs = DIRECTIONS[spec.num_classes]
    frames = np.empty((n, T, S, S, spec.channels), dtype=np.float32)
    boxes = []
    for i in range(n):
        canvas = (rng.standard_normal((T, S, S, spec.channels)) * spec.noise).astype(np.float32)
        clip_boxes = []
        for side in range(2):
            lab = int(rng.integers(spec.num_classes))
            dy, dx = dirs[lab]
            ylo = travel if dy < 0 else 0
            yhi = S - o - (travel if dy > 0 else 0)
            xlo = side * half + (travel if dx < 0 else 0)
            xhi = side * half + half - o - (travel if dx > 0 else 0)
            y0 = int(rng.integers(ylo, yhi + 1))
            x0 = int(rng.integers(xlo, xhi + 1))
            _render(spec, y0, x0, dy, dx, rng, canvas)
            ys = [y0, y0 + dy * travel]
            xs = [x0, x0 + dx * travel]
            box = (min(xs) / S, min(ys) / S, (max(xs) + o) / S, (max(ys) + o) / S)
            clip_boxes.append(BoxAnnotation(box, {lab}, (T // 2) / spec.fps, f"clip{i:05d}"))
        frames[i] = canvas
        boxes.append(clip_boxes)
    return DetectionClips(frames, boxes, spec.fps)


def write_dataset(data: LabeledClips, directory, split: str) -> Path:
    """Write clips as T3SR files and a ``<split>.tsv`` manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(data)):
        rel = f"clips/{split}_{i:05d}.t3sr"
        tensorfile.save(directory / rel, data.frames[i])
        records.append(ManifestRecord(rel, data.fps, label=int(data.labels[i])))
    manifest = directory / f"{split}.tsv"
    write_manifest(manifest, records)
    return manifest


def read_dataset(manifest) -> LabeledClips:
    from .sampler import read_manifest

    manifest = Path(manifest)
    records = read_manifest(manifest)
    if not records:
        raise InputError(f"{manifest} lists no clips")
    frames, labels = [], []
    for r in records:
        if r.label is None:
            raise InputError(f"{r.path}: classification manifest entry without a label")
        frames.append(VideoClip(tensorfile.load(manifest.parent / r.path), r.fps).frames)
        labels.append(r.label)
    return LabeledClips(np.stack(frames), np.asarray(labels, dtype=np.int64), records[0].fps)


# ---------------------------------------------------------------------------
# detection training
# ---------------------------------------------------------------------------


def train_detector(model: ActionDetector, data: DetectionClips, cfg: TrainConfig) -> list[EpochLog]:
    """Per-class binary cross-entropy on ground-truth boxes."""
    trainer = Trainer(model, cfg)
    K = model.cfg.num_classes
    history = []
    n = len(data.boxes)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(n, cfg.batch_size, trainer.rng):
            x = data.frames[idx]
            boxes = [data.boxes[i] for i in idx]
            targets = np.zeros((sum(len(b) for b in boxes), K))
            r = 0
            for blist in boxes:
                for b in blist:
                    targets[r, sorted(b.class_ids)] = 1.0
                    r += 1
            losses.append(trainer.step(lambda: tn.bce_with_logits(model(x, boxes, trainer.rng), targets)))
        history.append(EpochLog(epoch, float(np.mean(losses)), float("nan"), float("nan")))
        log.info("detector epoch %d loss %.4f", epoch, history[-1].loss)
    return history
