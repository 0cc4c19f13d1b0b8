"""Synthetic two-pseudo-speaker corpus with a known ground-truth mapping.

Base trajectories are smoothed sums of random-phase sinusoids. Their
frequency band and amplitude depend on the coefficient index (so does a
constant offset), which keeps the dimensions statistically distinguishable.
Small white jitter is added after smoothing. Each pseudo-speaker applies
an invertible transform to base trajectories::

    speaker(x) = fir(mix @ (scale * x)) + bias

with a per-dimension ``scale``, an orthogonal ``mix`` over dimensions and a
3-tap temporal FIR filter whose center tap dominates (zero boundary
conditions, so the filter is a strictly diagonally dominant tridiagonal
matrix and can be inverted exactly). Training sets of the two speakers are
drawn from disjoint base trajectories; held-out "oracle" targets apply the
other speaker's transform to the same bases as the evaluation inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.linalg import expm, solve_banded

from . import features


class SynthSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    seed: int = 0
    n_train: int = 40
    n_eval: int = 5
    q: int = 20
    t_min: int = 140
    t_max: int = 180
    n_sines: int = 4
    jitter: float = 0.1
    scale_min: float = 0.5
    scale_max: float = 2.0
    mix_angle: float = 0.6
    fir_side_max: float = 0.35
    bias_std: float = 0.5

    def validate(self) -> None:
        if self.q < 2:
            raise SynthSpecError("q must be >= 2")
        if self.n_train < 1 or self.n_eval < 1:
            raise SynthSpecError("n_train and n_eval must be >= 1")
        if not 1 <= self.t_min <= self.t_max:
            raise SynthSpecError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if not 0 < self.scale_min <= self.scale_max:
            raise SynthSpecError("scales must be positive for the transform to be invertible")
        if not 0 <= self.fir_side_max < 0.5:
            raise SynthSpecError(
                "fir_side_max must be in [0, 0.5): two side taps must stay below the unit center tap"
            )
        if self.n_sines < 1:
            raise SynthSpecError("n_sines must be >= 1")
        if self.jitter < 0:
            raise SynthSpecError("jitter must be >= 0")

    @classmethod
    def from_text(cls, text: str) -> SynthSpec:
        types = {f.name: type(f.default) for f in fields(cls)}
        kw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SynthSpecError(f"line {n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise SynthSpecError(f"line {n}: unknown key {k!r}")
            try:
                kw[k] = types[k](v)
            except ValueError:
                raise SynthSpecError(f"line {n}: bad value for {k}: {v!r}") from None
        spec = cls(**kw)
        spec.validate()
        return spec

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


@dataclass
class SpeakerTransform:
    scale: np.ndarray  # (Q,)
    mix: np.ndarray  # (Q, Q), orthogonal
    fir: np.ndarray  # (3,), taps for t-1, t, t+1
    bias: np.ndarray  # (Q,)

    def __post_init__(self):
        if np.any(self.scale == 0):
            raise SynthSpecError("zero scale is not invertible")
        if abs(self.fir[1]) <= abs(self.fir[0]) + abs(self.fir[2]):
            raise SynthSpecError("FIR center tap must dominate the side taps")
        if not np.allclose(self.mix @ self.mix.T, np.eye(len(self.scale)), atol=1e-10):
            raise SynthSpecError("mixing matrix is not orthogonal")

    def apply(self, x: np.ndarray) -> np.ndarray:
        h = self.mix @ (self.scale[:, None] * x)
        out = self.fir[1] * h
        out[:, 1:] += self.fir[0] * h[:, :-1]
        out[:, :-1] += self.fir[2] * h[:, 1:]
        return out + self.bias[:, None]

    def invert(self, y: np.ndarray) -> np.ndarray:
        h = np.asarray(y, dtype=np.float64) - self.bias[:, None]
        t = h.shape[1]
        bands = np.zeros((3, t))
        bands[0, 1:] = self.fir[2]  # superdiagonal: weight of x[t+1] in y[t]
        bands[1, :] = self.fir[1]
        bands[2, :-1] = self.fir[0]
        h = solve_banded((1, 1), bands, h.T).T
        return (self.mix.T @ h) / self.scale[:, None]

    def to_text(self, name: str) -> str:
        fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))  # noqa: E731
        q = len(self.scale)
        return (
            f"{name}.scale {fmt(self.scale)}\n"
            f"{name}.mix {q} {fmt(self.mix)}\n"
            f"{name}.fir {fmt(self.fir)}\n"
            f"{name}.bias {fmt(self.bias)}\n"
        )


def _random_transform(spec: SynthSpec, rng: np.random.Generator) -> SpeakerTransform:
    q = spec.q
    scale = rng.uniform(spec.scale_min, spec.scale_max, q)
    k = rng.standard_normal((q, q))
    k = k - k.T
    k /= np.linalg.norm(k, 2)
    mix = expm(spec.mix_angle * k)
    mix, _ = np.linalg.qr(mix)  # re-orthogonalize; signs may flip
    mix = mix * np.sign(np.diag(mix))[None, :]
    sides = rng.uniform(-spec.fir_side_max, spec.fir_side_max, 2)
    fir = np.array([sides[0], 1.0, sides[1]])
    bias = rng.normal(0.0, spec.bias_std, q)
    return SpeakerTransform(scale, mix, fir, bias)


@dataclass
class _BaseProcess:
    lo: np.ndarray
    hi: np.ndarray
    amp: np.ndarray
    offset: np.ndarray


def _base_process(spec: SynthSpec, rng: np.random.Generator) -> _BaseProcess:
    q = spec.q
    d = np.arange(q)
    lo = 0.01 + 0.12 * rng.random(q)
    hi = lo + 0.02 + 0.08 * rng.random(q)
    amp = 1.0 / (1.0 + 0.25 * d)
    offset = rng.normal(0.0, 0.5, q) * amp
    return _BaseProcess(lo, hi, amp, offset)


def base_trajectory(
    proc: _BaseProcess, t: int, n_sines: int, rng: np.random.Generator, jitter: float = 0.0
) -> np.ndarray:
    q = len(proc.lo)
    freq = proc.lo[:, None] + (proc.hi - proc.lo)[:, None] * rng.random((q, n_sines))
    phase = rng.uniform(0, 2 * np.pi, (q, n_sines))
    weight = rng.uniform(0.5, 1.0, (q, n_sines))
    tt = np.arange(t)
    x = (weight[:, :, None] * np.sin(2 * np.pi * freq[:, :, None] * tt + phase[:, :, None])).sum(1)
    x *= proc.amp[:, None] / np.sqrt(n_sines / 2)
    # 3-frame moving-average smoothing
    x = np.apply_along_axis(lambda r: np.convolve(r, np.ones(3) / 3, mode="same"), 1, x)
    # Unsmoothed frame-level jitter, like analysis noise in real cepstra. It
    # keeps the modulation spectrum broadband instead of empty above the
    # sinusoid band.
    if jitter:
        x += jitter * proc.amp[:, None] * rng.standard_normal((q, t))
    return x + proc.offset[:, None]


@dataclass
class SynthCorpus:
    spec: SynthSpec
    transform_a: SpeakerTransform
    transform_b: SpeakerTransform
    train_a: list[np.ndarray]
    train_b: list[np.ndarray]
    eval_a: list[np.ndarray]
    eval_b: list[np.ndarray]
    oracle_ab: list[np.ndarray]  # transform_b applied to the bases of eval_a
    oracle_ba: list[np.ndarray]

    def map_ab(self, a: np.ndarray) -> np.ndarray:
        return self.transform_b.apply(self.transform_a.invert(a))

    def map_ba(self, b: np.ndarray) -> np.ndarray:
        return self.transform_a.apply(self.transform_b.invert(b))


def generate(spec: SynthSpec) -> SynthCorpus:
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    s_trans, s_proc, s_a, s_b, s_ea, s_eb = (np.random.default_rng(s) for s in root.spawn(6))
    ta = _random_transform(spec, s_trans)
    tb = _random_transform(spec, s_trans)
    proc = _base_process(spec, s_proc)

    def bases(rng, n):
        return [base_trajectory(proc, int(rng.integers(spec.t_min, spec.t_max + 1)), spec.n_sines, rng, spec.jitter) for _ in range(n)]

    base_a, base_b = bases(s_a, spec.n_train), bases(s_b, spec.n_train)
    base_ea, base_eb = bases(s_ea, spec.n_eval), bases(s_eb, spec.n_eval)
    return SynthCorpus(
        spec,
        ta,
        tb,
        [ta.apply(x) for x in base_a],
        [tb.apply(x) for x in base_b],
        [ta.apply(x) for x in base_ea],
        [tb.apply(x) for x in base_eb],
        [tb.apply(x) for x in base_ea],
        [ta.apply(x) for x in base_eb],
    )


def write_corpus(corpus: SynthCorpus, out_dir) -> dict[str, Path]:
    """Write the feature files with their manifests and the ground-truth description.

    Returns the manifest paths keyed ``train_a``, ``train_b``, ``eval_a``,
    ``eval_b``, ``oracle_ab`` and ``oracle_ba``.
    """
    out = Path(out_dir)
    groups = {
        "train_a": ("A/train", "a", corpus.train_a),
        "train_b": ("B/train", "b", corpus.train_b),
        "eval_a": ("A/eval", "a_eval", corpus.eval_a),
        "eval_b": ("B/eval", "b_eval", corpus.eval_b),
        "oracle_ab": ("oracle_ab", "a_eval", corpus.oracle_ab),
        "oracle_ba": ("oracle_ba", "b_eval", corpus.oracle_ba),
    }
    manifests = {}
    for key, (sub, stem, seqs) in groups.items():
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, x in enumerate(seqs):
            p = d / f"{stem}_{i:03d}.mcp"
            features.write_features(p, x)
            paths.append(p.resolve())
        m = out / f"{key}.list"
        m.write_text("".join(f"{p}\n" for p in paths))
        manifests[key] = m
    (out / "ground_truth.txt").write_text(
        "# speaker(x) = fir(mix @ (scale * x)) + bias; map A->B = B(A^-1(a))\n"
        + corpus.transform_a.to_text("A")
        + corpus.transform_b.to_text("B")
    )
    (out / "synth_spec.txt").write_text(corpus.spec.to_text())
    return manifests


def read_ground_truth(path) -> tuple[SpeakerTransform, SpeakerTransform]:
    vals: dict[str, list[float]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, *rest = line.split()
        vals[k] = [float(v) for v in rest]
    out = []
    for name in ("A", "B"):
        q = int(vals[f"{name}.mix"][0])
        out.append(
            SpeakerTransform(
                np.array(vals[f"{name}.scale"]),
                np.array(vals[f"{name}.mix"][1:]).reshape(q, q),
                np.array(vals[f"{name}.fir"]),
                np.array(vals[f"{name}.bias"]),
            )
        )
    return out[0], out[1]
