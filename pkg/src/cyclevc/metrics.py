"""Mel-cepstral distortion with DTW alignment, and modulation spectra distance.

Both metrics ignore the 0th (energy) coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

MCD_CONST = 10.0 / np.log(10.0) * np.sqrt(2.0)
MS_SEGMENT = 64
MS_HOP = 32
MS_FLOOR = 1e-10

_STEPS = ((1, 1), (1, 0), (0, 1))  # tie-break order during backtracking: diagonal first


def mcd_frame(c, t) -> float:
    """Distortion in dB between two frames of coefficients (0th already removed)."""
    c, t = np.asarray(c, dtype=np.float64), np.asarray(t, dtype=np.float64)
    if c.shape != t.shape:
        raise ValueError(f"frame length mismatch {c.shape} vs {t.shape}")
    d = c - t
    return float(MCD_CONST * np.sqrt(np.dot(d, d)))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("sequences must be Q x T arrays")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"feature dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ValueError("sequences must be non-empty")


def frame_costs(converted: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Euclidean distance between every converted and target frame over dims 1..Q-1."""
    a = np.asarray(converted, dtype=np.float64)[1:].T
    b = np.asarray(target, dtype=np.float64)[1:].T
    return cdist(a, b)


def dtw_align(converted: np.ndarray, target: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost monotone alignment path under steps (1,0), (0,1), (1,1)."""
    converted, target = np.asarray(converted), np.asarray(target)
    _check_pair(converted, target)
    cost = frame_costs(converted, target)
    return _dtw_path(cost)[0]


def _dtw_path(cost: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        prev = acc[i - 1]
        row = acc[i]
        ci = cost[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = ci[j - 1] + best
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        best = None
        for di, dj in _STEPS:
            pi, pj = i - di, j - dj
            if pi < 1 or pj < 1:
                continue
            if best is None or acc[pi, pj] < acc[best[0], best[1]]:
                best = (pi, pj)
        i, j = best
        path.append((i - 1, j - 1))
    path.reverse()
    return path, float(acc[n, m])


def path_cost(converted: np.ndarray, target: np.ndarray, path) -> float:
    cost = frame_costs(converted, target)
    return float(sum(cost[i, j] for i, j in path))


def mcd_utterance(converted: np.ndarray, target: np.ndarray) -> float:
    """Mean frame distortion along the DTW path."""
    converted, target = np.asarray(converted, dtype=np.float64), np.asarray(target, dtype=np.float64)
    path = dtw_align(converted, target)
    ii = np.array([p[0] for p in path])
    jj = np.array([p[1] for p in path])
    d = converted[1:, ii] - target[1:, jj]
    return float(np.mean(MCD_CONST * np.sqrt((d * d).sum(axis=0))))


@dataclass
class MetricSummary:
    mean: float
    std: float
    values: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        return f"{self.mean:.4f} +/- {self.std:.4f}"


def summarize(values) -> MetricSummary:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    return MetricSummary(float(v.mean()), float(v.std()), v.tolist())


def mcd_summary(pairs) -> MetricSummary:
    """Summary of per-utterance MCD over (converted, target) array pairs."""
    return summarize(mcd_utterance(c, t) for c, t in pairs)


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def modulation_spectrum(traj, pad_short: bool = False) -> np.ndarray:
    """Log10 power modulation spectrum of one coefficient trajectory.

    The utterance mean is removed, then 64-frame Hann-windowed segments with
    50% overlap are transformed with a 64-point DFT; the power of the 33
    non-negative frequency bins is averaged over segments and floored at
    1e-10 before taking log10. Trajectories shorter than one segment are
    rejected unless ``pad_short`` zero-pads them.
    """
    x = np.asarray(traj, dtype=np.float64).ravel()
    if x.size < MS_SEGMENT:
        if not pad_short or x.size == 0:
            raise ValueError(f"trajectory of {x.size} frames is shorter than the minimum {MS_SEGMENT}")
        x = np.concatenate([x - x.mean(), np.zeros(MS_SEGMENT - x.size)])
    else:
        x = x - x.mean()
    n_seg = 1 + (x.size - MS_SEGMENT) // MS_HOP
    idx = np.arange(n_seg)[:, None] * MS_HOP + np.arange(MS_SEGMENT)[None, :]
    seg = x[idx] * _hann(MS_SEGMENT)
    power = np.abs(np.fft.rfft(seg, n=MS_SEGMENT, axis=1)) ** 2
    return np.log10(np.maximum(power.mean(axis=0), MS_FLOOR))


def modulation_spectra(seq: np.ndarray) -> np.ndarray:
    """Spectra of dims 1..Q-1 of a Q x T sequence, shape (Q-1, 33)."""
    seq = np.asarray(seq)
    return np.stack([modulation_spectrum(seq[d], pad_short=True) for d in range(1, seq.shape[0])])


def msd(converted: np.ndarray, target: np.ndarray) -> float:
    """RMS difference of log modulation spectra in dB (10 x log10 units)."""
    converted, target = np.asarray(converted), np.asarray(target)
    _check_pair(converted, target)
    if converted.shape[0] < 2:
        raise ValueError("need at least one coefficient beyond the 0th")
    diff = modulation_spectra(converted) - modulation_spectra(target)
    return float(10.0 * np.sqrt(np.mean(diff * diff)))
