"""Apply a trained generator to raw feature sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features, models
from .training import Checkpoint

DIRECTIONS = ("xy", "yx")


@dataclass
class Converter:
    generator: models.Generator
    source: features.NormStats
    target: features.NormStats

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, direction: str) -> Converter:
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        for tag, s in (("x", ckpt.stats_x), ("y", ckpt.stats_y)):
            if s is None or s.q != ckpt.q:
                raise ValueError(f"checkpoint lacks usable normalization statistics for speaker {tag}")
        ms = ckpt.models()
        if direction == "xy":
            return cls(ms.g_xy, ckpt.stats_x, ckpt.stats_y)
        return cls(ms.g_yx, ckpt.stats_y, ckpt.stats_x)

    @property
    def q(self) -> int:
        return self.generator.spec.q

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Normalize with source stats, convert, denormalize with target stats."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[0] != self.q:
            raise features.DimensionError(f"expected a {self.q} x T sequence, got shape {x.shape}")
        z = features.normalize(x, self.source).astype(np.float32)
        y = models.convert_sequence(self.generator, z)
        return features.denormalize(y.astype(np.float64), self.target).astype(np.float32)
