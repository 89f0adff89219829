"""Box-level action detection: dilated final stage, ROI features, per-class sigmoid."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .backbone import Backbone, NetworkConfig
from .errors import InputError
from .modules import Linear, Module
from .tensor import Tensor


@dataclass
class BoxAnnotation:
    box: tuple  # normalised (x1, y1, x2, y2)
    class_ids: frozenset = field(default_factory=frozenset)
    keyframe_time: float = 0.0
    clip_id: str = ""

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        self.class_ids = frozenset(int(c) for c in self.class_ids)
        validate_box(self.box)
        if not self.class_ids:
            raise InputError(f"ground-truth box {self.box} carries no class label")


@dataclass
class Detection:
    box: tuple
    scores: np.ndarray
    keyframe_time: float = 0.0
    clip_id: str = ""

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise InputError("detection scores must lie in [0, 1]")


def validate_box(box) -> None:
    x1, y1, x2, y2 = box
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise InputError(f"box {box} is not a valid normalised (x1, y1, x2, y2)")


def box_to_roi(box, height: int, width: int, batch_index: int = 0) -> np.ndarray:
    """Normalised box -> [batch, x1, y1, x2, y2] in feature-pixel units.

    Boxes narrower than one feature cell are widened to one cell about their
    centre, with a warning.
    """
    validate_box(box)
    x1, y1, x2, y2 = box[0] * width, box[1] * height, box[2] * width, box[3] * height
    degenerate = False
    if x2 - x1 < 1.0:
        x1, x2 = _widen(x1, x2, width)
        degenerate = True
    if y2 - y1 < 1.0:
        y1, y2 = _widen(y1, y2, height)
        degenerate = True
    if degenerate:
        warnings.warn(f"box {tuple(box)} spans less than one feature cell; clamped to 1x1", stacklevel=2)
    return np.array([batch_index, x1, y1, x2, y2], dtype=np.float64)


def _widen(lo: float, hi: float, size: int):
    c = min(max((lo + hi) / 2, 0.5), size - 0.5)
    return c - 0.5, c + 0.5


def roi_extract(feat: Tensor, boxes, out_size=(7, 7), batch_indices=None) -> Tensor:
    """ROI volumes (B, C, T, h, w): the same 2D box sampled at every time index."""
    n, c, t, h, w = feat.shape
    if batch_indices is None:
        batch_indices = [0] * len(boxes)
    rois = np.stack([box_to_roi(b.box if isinstance(b, BoxAnnotation) else b, h, w, i)
                     for b, i in zip(boxes, batch_indices)])
    return tn.roi_align(feat, rois, out_size)


def roi_pool(volumes: Tensor) -> Tensor:
    """Max over (T, h, w) of ROI volumes -> (B, C)."""
    b, c, t, h, w = volumes.shape
    return tn.reshape(tn.maxpool3d(volumes, (t, h, w)), (b, c))


def dilated_res5(x: Tensor, blocks) -> Tensor:
    """Final stage at stride 1 with dilation-2 filters: spatial extent is preserved."""
    for block in blocks:
        x = block(x)
    return x


class ActionDetector(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, roi_size: int = 7, dropout_p: float = 0.0):
        self.cfg = cfg.replace(dilate_last=True, head="none")
        self.roi_size = roi_size
        self.dropout_p = dropout_p
        self.backbone = Backbone(self.cfg, rng)
        self.fc = Linear(rng, self.cfg.feature_dim, self.cfg.num_classes)

    def box_features(self, frames, boxes_per_clip) -> Tensor:
        """Concatenated per-pathway ROI features, one row per box in clip order."""
        if len(boxes_per_clip) != np.asarray(frames).shape[0]:
            raise InputError("need one box list per clip")
        feats = self.backbone.forward_stages(self.backbone.prepare(frames))
        boxes, owners = [], []
        for i, blist in enumerate(boxes_per_clip):
            boxes.extend(blist)
            owners.extend([i] * len(blist))
        if not boxes:
            raise InputError("no boxes to classify")
        parts = [roi_pool(roi_extract(feats[name], boxes, (self.roi_size, self.roi_size), owners))
                 for name in self.cfg.pathways]
        return tn.concat(parts, axis=1)

    def __call__(self, frames, boxes_per_clip, rng=None) -> Tensor:
        """Per-box class logits (B, num_classes)."""
        x = tn.dropout(self.box_features(frames, boxes_per_clip), self.dropout_p, self.training, rng)
        return self.fc(x)


def build_detector(cfg: NetworkConfig, seed: int = 0, roi_size: int = 7, dropout_p: float = 0.0) -> ActionDetector:
    return ActionDetector(cfg, np.random.default_rng(seed), roi_size, dropout_p)


def detect(clip, boxes, model: ActionDetector) -> list[Detection]:
    """Score ground-truth (or externally supplied) boxes for one clip."""
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    was_training = model.training
    model.eval()
    try:
        with tn.no_grad():
            logits = model(frames[None], [list(boxes)])
    finally:
        model.train(was_training)
    scores = tn.sigmoid(logits).data.astype(np.float64)
    out = []
    for b, s in zip(boxes, scores):
        box = b.box if isinstance(b, BoxAnnotation) else b
        out.append(Detection(box, s, getattr(b, "keyframe_time", 0.0), getattr(b, "clip_id", "")))
    return out


# ---------------------------------------------------------------------------
# detection manifest: one CSV row per (clip, box)
# ---------------------------------------------------------------------------

FIELDS = ["clip", "x1", "y1", "x2", "y2", "keyframe_time", "labels", "scores"]


def write_detection_manifest(path, items) -> None:
    """Write BoxAnnotation (labels column) and/or Detection (scores column) rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for it in items:
            labels = ";".join(str(c) for c in sorted(it.class_ids)) if isinstance(it, BoxAnnotation) else ""
            scores = ";".join(f"{s:.6f}" for s in it.scores) if isinstance(it, Detection) else ""
            w.writerow([it.clip_id, *(f"{v:.6f}" for v in it.box), f"{it.keyframe_time:.3f}", labels, scores])


def read_detection_manifest(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIELDS:
            raise InputError(f"{path}: expected header {FIELDS}, got {reader.fieldnames}")
        for row in reader:
            box = tuple(float(row[k]) for k in ("x1", "y1", "x2", "y2"))
            t = float(row["keyframe_time"])
            if row["scores"]:
                out.append(Detection(box, [float(s) for s in row["scores"].split(";")], t, row["clip"]))
            else:
                labels = [int(c) for c in row["labels"].split(";") if c]
                out.append(BoxAnnotation(box, labels, t, row["clip"]))
    return out
