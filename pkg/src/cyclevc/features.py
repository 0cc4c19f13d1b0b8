"""Feature files plus the normalization and F0 arithmetic around the networks.

Feature file layout (little-endian)::

    bytes 0-3   b"MCP1"
    u32         Q  (feature dimension)
    u32         T  (frames)
    Q*T f32     values, dimension-major (all frames of dim 0, then dim 1, ...)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MCP1"
_HEADER = struct.Struct("<4sII")
MAX_DIM = 1 << 16
MAX_FRAMES = 1 << 26
STD_FLOOR = 1e-8


class FeatureFileError(ValueError):
    pass


class BadMagicError(FeatureFileError):
    pass


class DimensionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


def write_features(path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"feature sequence must be Q x T, got shape {x.shape}")
    q, t = x.shape
    if q < 1 or t < 1:
        raise DimensionError(f"feature sequence needs q >= 1 and t >= 1, got {q} x {t}")
    if not np.all(np.isfinite(x)):
        raise FeatureFileError("feature sequence contains non-finite values")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, q, t))
        f.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read a ``Q x T`` float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] and raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, q, t = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if q < 1 or t < 1:
        raise DimensionError(f"{path}: empty feature sequence ({q} x {t})")
    if q > MAX_DIM or t > MAX_FRAMES:
        raise DimensionError(f"{path}: dimensions {q} x {t} exceed limits")
    need = _HEADER.size + 4 * q * t
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise FeatureFileError(f"{path}: {len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(q, t).astype(np.float32)


def read_header(path) -> tuple[int, int]:
    """``(Q, T)`` from a feature file header, validated against the file size."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncatedFileError(f"{p}: truncated header ({len(head)} bytes)")
    magic, q, t = _HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(f"{p}: bad magic {magic!r}, expected {MAGIC!r}")
    if q < 1 or t < 1 or q > MAX_DIM or t > MAX_FRAMES:
        raise DimensionError(f"{p}: unusable dimensions {q} x {t}")
    if p.stat().st_size != _HEADER.size + 4 * q * t:
        raise TruncatedFileError(f"{p}: size does not match its {q} x {t} header")
    return q, t


@dataclass
class NormStats:
    mcep_mean: np.ndarray
    mcep_std: np.ndarray
    logf0_mean: float | None = None
    logf0_std: float | None = None

    def __post_init__(self):
        self.mcep_mean = np.asarray(self.mcep_mean, dtype=np.float64)
        self.mcep_std = np.asarray(self.mcep_std, dtype=np.float64)
        if self.mcep_mean.shape != self.mcep_std.shape or self.mcep_mean.ndim != 1:
            raise DimensionError("mean and std must be vectors of equal length")
        if np.any(self.mcep_std <= 0):
            raise ValueError("standard deviations must be positive")
        if self.logf0_std is not None and self.logf0_std <= 0:
            raise ValueError("log-F0 standard deviation must be positive")

    @property
    def q(self) -> int:
        return self.mcep_mean.shape[0]

    def to_text(self) -> str:
        lines = [
            "mcep_mean " + " ".join(repr(float(v)) for v in self.mcep_mean),
            "mcep_std " + " ".join(repr(float(v)) for v in self.mcep_std),
        ]
        if self.logf0_mean is not None:
            lines.append(f"logf0_mean {float(self.logf0_mean)!r}")
            lines.append(f"logf0_std {float(self.logf0_std)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> NormStats:
        fields: dict[str, list[float]] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *vals = line.split()
            fields[key] = [float(v) for v in vals]
        try:
            mean, std = fields["mcep_mean"], fields["mcep_std"]
        except KeyError as e:
            raise ValueError(f"stats file missing {e.args[0]}") from None
        f0m = fields.get("logf0_mean", [None])[0]
        f0s = fields.get("logf0_std", [None])[0]
        return cls(np.array(mean), np.array(std), f0m, f0s)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> NormStats:
        return cls.from_text(Path(path).read_text())


def compute_stats(sequences, f0_sequences=None) -> NormStats:
    """Per-dimension population mean/std over all frames of all sequences.

    Log-F0 statistics are computed over voiced frames (F0 > 0) when F0
    tracks are supplied.
    """
    seqs = list(sequences)
    if not seqs:
        raise ValueError("cannot compute statistics of an empty corpus")
    frames = np.concatenate([np.asarray(s, dtype=np.float64) for s in seqs], axis=1)
    mean = frames.mean(axis=1)
    std = np.maximum(frames.std(axis=1), STD_FLOOR)
    f0m = f0s = None
    if f0_sequences is not None:
        f0 = np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in f0_sequences])
        voiced = np.log(f0[f0 > 0])
        if voiced.size == 0:
            raise ValueError("no voiced frames for log-F0 statistics")
        f0m = float(voiced.mean())
        f0s = float(max(voiced.std(), STD_FLOOR))
    return NormStats(mean, std, f0m, f0s)


def _check_dim(x: np.ndarray, s: NormStats) -> None:
    if x.shape[0] != s.q:
        raise DimensionError(f"feature dimension {x.shape[0]} != statistics dimension {s.q}")


def normalize(x: np.ndarray, s: NormStats) -> np.ndarray:
    x = np.asarray(x)
    _check_dim(x, s)
    return (x - s.mcep_mean[:, None]) / s.mcep_std[:, None]


def denormalize(x: np.ndarray, s: NormStats) -> np.ndarray:
    x = np.asarray(x)
    _check_dim(x, s)
    return x * s.mcep_std[:, None] + s.mcep_mean[:, None]


def convert_f0(logf0, src: NormStats, tgt: NormStats):
    """Log-Gaussian normalized transform of voiced log-F0 values."""
    for s in (src, tgt):
        if s.logf0_std is None or s.logf0_std <= 0:
            raise ValueError("log-F0 statistics missing or non-positive std")
    return tgt.logf0_mean + (tgt.logf0_std / src.logf0_std) * (np.asarray(logf0) - src.logf0_mean)


def convert_f0_track(f0, src: NormStats, tgt: NormStats) -> np.ndarray:
    """Convert a linear-F0 track; unvoiced frames (F0 <= 0) pass through unchanged."""
    f0 = np.asarray(f0, dtype=np.float64)
    out = f0.copy()
    voiced = f0 > 0
    out[voiced] = np.exp(convert_f0(np.log(f0[voiced]), src, tgt))
    return out


def differential_mceps(source: np.ndarray, converted: np.ndarray) -> np.ndarray:
    source, converted = np.asarray(source), np.asarray(converted)
    if source.shape != converted.shape:
        raise DimensionError(f"shape mismatch {source.shape} vs {converted.shape}")
    return converted - source
