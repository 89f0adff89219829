"""Backbone + temporal head + classifier, assembled from a NetworkConfig."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, NetworkConfig
from .heads import Classifier, build_head, head_output_dim
from .modules import Module
from .tensor import Tensor


class ThreeStreamNet(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, dropout_p: float = 0.0):
        self.cfg = cfg
        self.dropout_p = dropout_p
        self.backbone = Backbone(cfg, rng)
        self.head = build_head(cfg.head, rng, cfg.feature_dim, cfg.attn_heads, cfg.lstm_hidden)
        self.classifier = Classifier(rng, head_output_dim(cfg.head, cfg.feature_dim, cfg.lstm_hidden), cfg.num_classes)

    def features(self, frames) -> Tensor:
        seq = self.backbone(frames)
        return self.head(seq) if self.head is not None else seq

    def __call__(self, frames, rng=None) -> Tensor:
        """(N, T, H, W, C) frames -> (N, num_classes) logits."""
        return self.classifier(self.features(frames), self.dropout_p, rng)


def build_model(cfg: NetworkConfig, seed: int = 0, dropout_p: float = 0.0) -> ThreeStreamNet:
    return ThreeStreamNet(cfg, np.random.default_rng(seed), dropout_p)
