"""Cycle-consistent adversarial training loop and checkpoints.

Each iteration draws one random crop per speaker (``batch_size`` crops when
larger), updates every active discriminator on detached generator outputs,
then updates both generators jointly on the weighted generator objective.
All randomness comes from one seeded ``numpy`` generator whose state is
stored in checkpoints, so an interrupted run resumes bit-exactly.

Checkpoint layout (little-endian)::

    b"CVC2"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_arrays
    n_arrays x [u16 name_len, name, u8 dtype (0=f4, 1=f8), u8 ndim, u32 dims..., data]
    u32 crc32 of everything above
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import features, ops
from .losses import LossReport, LossWeights, cycle_loss, identity_loss, lsgan_d_loss, lsgan_g_loss
from .models import (
    ArchitectureError,
    DiscriminatorSpec,
    GeneratorSpec,
    ModelSet,
    Network,
    build_model_set,
)
from .ops import AdamState, Grid

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CVC2"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, term: str):
        self.iteration = iteration
        self.term = term
        super().__init__(f"non-finite {term} at iteration {iteration}")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


@dataclass
class TrainingConfig:
    iterations: int = 200_000
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    crop_frames: int = 128
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    id_cutoff_iter: int = 10_000
    adv_steps: int = 2
    generator_kind: str = "2-1-2d"
    discriminator_kind: str = "patch"
    g_width: int = 128
    d_width: int = 128
    n_residual: int = 6
    checkpoint_every: int = 5000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.adv_steps not in (1, 2):
            raise ValueError(f"adv_steps must be 1 or 2, got {self.adv_steps}")
        if self.crop_frames % 4 or self.crop_frames < 16:
            raise ValueError(f"crop_frames must be a multiple of 4 and >= 16, got {self.crop_frames}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.id_cutoff_iter <= max(self.iterations, 0):
            raise ValueError(
                f"id_cutoff_iter={self.id_cutoff_iter} must lie in [0, iterations={self.iterations}]"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_g", "lr_d", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        LossWeights(self.lambda_cyc, self.lambda_id, self.adv_steps)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cyc, self.lambda_id, self.adv_steps)

    def generator_spec(self, q: int) -> GeneratorSpec:
        return GeneratorSpec(self.generator_kind, q, self.g_width, self.n_residual)

    def discriminator_spec(self, q: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(self.discriminator_kind, q, self.d_width, self.crop_frames)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        return cls(**d)


ARCH_KEYS = ("generator_kind", "discriminator_kind", "g_width", "d_width", "n_residual", "adv_steps", "crop_frames")


@dataclass
class Corpus:
    """Training sequences of one speaker and their normalization statistics."""

    sequences: list[np.ndarray]
    stats: features.NormStats

    @classmethod
    def from_sequences(cls, sequences, f0=None) -> Corpus:
        seqs = [np.asarray(s, dtype=np.float32) for s in sequences]
        if not seqs:
            raise ValueError("empty corpus")
        qs = {s.shape[0] for s in seqs}
        if len(qs) != 1:
            raise ValueError(f"sequences disagree on feature dimension: {sorted(qs)}")
        return cls(seqs, features.compute_stats(seqs, f0))

    @property
    def q(self) -> int:
        return self.sequences[0].shape[0]

    def normalized(self) -> list[np.ndarray]:
        return [features.normalize(s, self.stats).astype(np.float32) for s in self.sequences]


def random_crop(x: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    t = x.shape[1]
    if t < frames:
        raise ValueError(f"sequence of {t} frames is shorter than the crop length {frames}")
    start = int(rng.integers(0, t - frames + 1))
    return x[:, start : start + frames]


def sample_batch(seqs: list[np.ndarray], frames: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Crops from randomly selected sentences; too-short sentences are redrawn."""
    if not any(s.shape[1] >= frames for s in seqs):
        raise ValueError(f"no sequence has at least {frames} frames")
    out = []
    while len(out) < batch:
        s = seqs[int(rng.integers(0, len(seqs)))]
        if s.shape[1] < frames:
            continue
        out.append(random_crop(s, frames, rng))
    return np.stack(out)


@dataclass
class OptimizerState:
    step: int = 0
    moments: dict[str, dict[str, AdamState]] = field(default_factory=dict)

    @classmethod
    def for_models(cls, models: ModelSet) -> OptimizerState:
        return cls(
            0,
            {
                name: {k: AdamState.like(p.data) for k, p in net.params.items()}
                for name, net in models.networks().items()
            },
        )


def _update(net: Network, name: str, moments: dict[str, AdamState], lr: float, cfg: TrainingConfig, t: int):
    for k, p in net.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        ops.adam_step(p.data, g, moments[k], lr, cfg.beta1, cfg.beta2, cfg.adam_eps, t, name=f"{name}/{k}")
        p.grad = None


def _set_trainable(nets, flag: bool) -> None:
    for net in nets:
        for p in net.params.values():
            p.requires_grad = flag


def _finite(value: float, iteration: int, term: str) -> float:
    if not np.isfinite(value):
        raise TrainingError(iteration, term)
    return value


def _scalar(g: Grid) -> float:
    return float(g.data.reshape(-1)[0])


def identity_active(cfg: TrainingConfig, iteration: int) -> bool:
    return iteration < cfg.id_cutoff_iter


@dataclass
class CycleGraph:
    """Generator outputs of one iteration, kept alive for both update phases."""

    x: Grid
    y: Grid
    fake_y: Grid
    fake_x: Grid
    cyc_x: Grid
    cyc_y: Grid
    id_y: Grid | None = None
    id_x: Grid | None = None


def cycle_graph(models: ModelSet, x: Grid, y: Grid, with_identity: bool) -> CycleGraph:
    """Run both generators forward, batching passes through the same network."""
    b = x.shape[0]
    g_xy, g_yx = models.g_xy, models.g_yx
    id_x = id_y = None
    if with_identity:
        out = g_xy(ops.concat_batch([x, y]))
        fake_y, id_y = ops.take_batch(out, 0, b), ops.take_batch(out, b, 2 * b)
        out = g_yx(ops.concat_batch([y, x]))
        fake_x, id_x = ops.take_batch(out, 0, b), ops.take_batch(out, b, 2 * b)
    else:
        fake_y, fake_x = g_xy(x), g_yx(y)
    return CycleGraph(x, y, fake_y, fake_x, g_yx(fake_y), g_xy(fake_x), id_y, id_x)


def generator_objective(
    models: ModelSet, graph: CycleGraph, cfg: TrainingConfig, report: LossReport
) -> Grid:
    """Weighted generator objective; fills the generator fields of ``report``."""
    adv = [lsgan_g_loss(models.d_y(graph.fake_y)), lsgan_g_loss(models.d_x(graph.fake_x))]
    report.adv_g = sum(_scalar(a) for a in adv)
    terms: list[tuple[float, Grid]] = [(1.0, a) for a in adv]
    if cfg.adv_steps == 2:
        adv2 = [lsgan_g_loss(models.d2_x(graph.cyc_x)), lsgan_g_loss(models.d2_y(graph.cyc_y))]
        report.adv2_g = sum(_scalar(a) for a in adv2)
        terms += [(1.0, a) for a in adv2]
    cyc = cycle_loss(graph.x, graph.cyc_x, graph.y, graph.cyc_y)
    report.cyc = _scalar(cyc)
    terms.append((cfg.lambda_cyc, cyc))
    if graph.id_x is not None:
        idl = identity_loss(graph.y, graph.id_y, graph.x, graph.id_x)
        report.id = _scalar(idl)
        terms.append((cfg.lambda_id, idl))
    total = ops.sum_all(terms)
    report.total_g = _scalar(total)
    return total


def discriminator_objective(models: ModelSet, graph: CycleGraph, report: LossReport) -> Grid:
    """Least-squares loss of every active discriminator on detached fakes."""
    b = graph.x.shape[0]

    def d_loss(d, real: Grid, fake: Grid) -> Grid:
        scores = d(ops.concat_batch([real, fake.detach()]))
        return lsgan_d_loss(ops.take_batch(scores, 0, b), ops.take_batch(scores, b, 2 * b))

    terms = [d_loss(models.d_y, graph.y, graph.fake_y), d_loss(models.d_x, graph.x, graph.fake_x)]
    report.adv_d = sum(_scalar(t) for t in terms)
    if models.d2_x is not None:
        d2 = [d_loss(models.d2_x, graph.x, graph.cyc_x), d_loss(models.d2_y, graph.y, graph.cyc_y)]
        report.adv2_d = sum(_scalar(t) for t in d2)
        terms += d2
    total = ops.sum_all([(1.0, t) for t in terms])
    report.total_d = _scalar(total)
    return total


def train_step(
    models: ModelSet,
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    cfg: TrainingConfig,
    opt: OptimizerState,
    iteration: int,
    frozen: tuple[str, ...] = (),
) -> LossReport:
    """One discriminator update followed by one joint generator update.

    ``frozen`` names networks whose parameters are left untouched (used to
    probe the adversarial gradient path in isolation).
    """
    if (cfg.adv_steps == 2) != (models.d2_x is not None):
        raise ValueError(f"adv_steps={cfg.adv_steps} does not match the model set's discriminators")
    use_id = identity_active(cfg, iteration) and cfg.lambda_id > 0
    graph = cycle_graph(models, Grid(x_batch), Grid(y_batch), use_id)
    discs = models.discriminators()
    report = LossReport()
    t = iteration + 1

    total_d = discriminator_objective(models, graph, report)
    for name in ("adv_d", "adv2_d", "total_d"):
        _finite(getattr(report, name), iteration, name)
    total_d.backward()
    for name, d in discs.items():
        if name in frozen:
            d.zero_grad()
            continue
        _update(d, name, opt.moments[name], cfg.lr_d, cfg, t)

    # generator phase against the updated discriminators
    _set_trainable(discs.values(), False)
    try:
        total_g = generator_objective(models, graph, cfg, report)
        for name in ("adv_g", "adv2_g", "cyc", "id", "total_g"):
            _finite(getattr(report, name), iteration, name)
        total_g.backward()
    finally:
        _set_trainable(discs.values(), True)
    for name, g in models.generators().items():
        if name in frozen:
            g.zero_grad()
            continue
        _update(g, name, opt.moments[name], cfg.lr_g, cfg, t)
    opt.step = t
    return report


class Trainer:
    """Owns the models, optimizer moments, RNG and iteration counter of one run."""

    def __init__(self, corpus_x: Corpus, corpus_y: Corpus, cfg: TrainingConfig):
        if corpus_x.q != corpus_y.q:
            raise ValueError(f"speakers disagree on feature dimension: {corpus_x.q} vs {corpus_y.q}")
        self.cfg = cfg
        self.stats_x = corpus_x.stats
        self.stats_y = corpus_y.stats
        self.q = corpus_x.q
        self._x = corpus_x.normalized()
        self._y = corpus_y.normalized()
        for name, seqs in (("x", self._x), ("y", self._y)):
            if not any(s.shape[1] >= cfg.crop_frames for s in seqs):
                raise ValueError(f"speaker {name}: no sequence has at least {cfg.crop_frames} frames")
        ss = np.random.SeedSequence(cfg.seed)
        model_seed, data_seed = ss.spawn(2)
        self.models = build_model_set(
            cfg.generator_spec(self.q),
            cfg.discriminator_spec(self.q),
            cfg.adv_steps,
            int(model_seed.generate_state(1)[0]),
        )
        self.rng = np.random.default_rng(data_seed)
        self.opt = OptimizerState.for_models(self.models)
        self.iteration = 0

    def step(self) -> LossReport:
        xb = sample_batch(self._x, self.cfg.crop_frames, self.cfg.batch_size, self.rng)
        yb = sample_batch(self._y, self.cfg.crop_frames, self.cfg.batch_size, self.rng)
        report = train_step(self.models, xb, yb, self.cfg, self.opt, self.iteration)
        self.iteration += 1
        return report

    def run(
        self,
        until: int | None = None,
        out_dir=None,
        log_file=None,
        callback: Callable[[int, LossReport], None] | None = None,
    ) -> list[LossReport]:
        """Train until ``until`` (default ``cfg.iterations``) iterations have run."""
        stop = self.cfg.iterations if until is None else until
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
        reports = []
        fh = open(log_file, "a") if log_file is not None else None
        try:
            while self.iteration < stop:
                it = self.iteration
                report = self.step()
                reports.append(report)
                if fh is not None:
                    fh.write(report.log_line(it) + "\n")
                if callback is not None:
                    callback(it, report)
                if it % 100 == 0:
                    log.info("iter %d  total_g %.4f  total_d %.4f  cyc %.4f", it, report.total_g, report.total_d, report.cyc)
                if out_dir is not None and self.iteration % self.cfg.checkpoint_every == 0 and self.iteration < stop:
                    save_checkpoint(Path(out_dir) / f"checkpoint_{self.iteration:07d}.cvc2", self.checkpoint())
        finally:
            if fh is not None:
                fh.close()
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "final.cvc2", self.checkpoint())
        return reports

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            iteration=self.iteration,
            config=self.cfg,
            q=self.q,
            params={n: {k: p.data.copy() for k, p in net.params.items()} for n, net in self.models.networks().items()},
            moments={
                n: {k: (s.m.copy(), s.v.copy()) for k, s in m.items()} for n, m in self.opt.moments.items()
            },
            rng_state=self.rng.bit_generator.state,
            stats_x=self.stats_x,
            stats_y=self.stats_y,
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, corpus_x: Corpus, corpus_y: Corpus) -> Trainer:
        trainer = cls(corpus_x, corpus_y, ckpt.config)
        trainer.restore(ckpt)
        return trainer

    def restore(self, ckpt: Checkpoint) -> None:
        check_architecture(ckpt, self.cfg)
        nets = self.models.networks()
        if set(nets) != set(ckpt.params):
            raise ArchitectureMismatchError(f"checkpoint networks {sorted(ckpt.params)} != {sorted(nets)}")
        for n, net in nets.items():
            try:
                net.load_state(ckpt.params[n])
            except ArchitectureError as e:
                raise ArchitectureMismatchError(f"{n}: {e}") from None
            for k, (m, v) in ckpt.moments[n].items():
                self.opt.moments[n][k] = AdamState(m.copy(), v.copy())
        self.rng.bit_generator.state = ckpt.rng_state
        self.iteration = ckpt.iteration
        self.opt.step = ckpt.iteration
        self.stats_x, self.stats_y = ckpt.stats_x, ckpt.stats_y


def train(corpus_x: Corpus, corpus_y: Corpus, cfg: TrainingConfig, out_dir=None, log_file=None):
    """Run a full training job; returns the final checkpoint and the loss reports."""
    trainer = Trainer(corpus_x, corpus_y, cfg)
    reports = trainer.run(out_dir=out_dir, log_file=log_file)
    return trainer.checkpoint(), reports


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    config: TrainingConfig
    q: int
    params: dict[str, dict[str, np.ndarray]]
    moments: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]]
    rng_state: dict
    stats_x: features.NormStats
    stats_y: features.NormStats

    def models(self) -> ModelSet:
        cfg = self.config
        models = build_model_set(cfg.generator_spec(self.q), cfg.discriminator_spec(self.q), cfg.adv_steps, 0)
        for n, net in models.networks().items():
            net.load_state(self.params[n])
        return models


def check_architecture(ckpt: Checkpoint, cfg: TrainingConfig) -> None:
    diffs = [
        f"{k}: checkpoint={getattr(ckpt.config, k)!r} run={getattr(cfg, k)!r}"
        for k in ARCH_KEYS
        if getattr(ckpt.config, k) != getattr(cfg, k)
    ]
    if diffs:
        raise ArchitectureMismatchError("architecture mismatch: " + "; ".join(diffs))


def _stats_dict(s: features.NormStats) -> dict:
    return {"logf0_mean": s.logf0_mean, "logf0_std": s.logf0_std}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "iteration": ckpt.iteration,
        "q": ckpt.q,
        "config": ckpt.config.to_dict(),
        "rng_state": ckpt.rng_state,
        "stats_x": _stats_dict(ckpt.stats_x),
        "stats_y": _stats_dict(ckpt.stats_y),
    }
    arrays: list[tuple[str, np.ndarray]] = []
    for n, ps in ckpt.params.items():
        for k, a in ps.items():
            arrays.append((f"param/{n}/{k}", a))
    for n, ms in ckpt.moments.items():
        for k, (m, v) in ms.items():
            arrays.append((f"adam_m/{n}/{k}", m))
            arrays.append((f"adam_v/{n}/{k}", v))
    for tag, s in (("x", ckpt.stats_x), ("y", ckpt.stats_y)):
        arrays.append((f"stats/{tag}/mcep_mean", s.mcep_mean))
        arrays.append((f"stats/{tag}/mcep_std", s.mcep_std))

    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hb)), hb, struct.pack("<I", len(arrays))]
    for name, a in arrays:
        a = np.asarray(a)
        code = _DTYPE_CODES.get(a.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {a.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect: TrainingConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` the stored architecture must match it."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint")
    r = _Reader(raw[:-4], path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header ({e})") from None
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.raw):
        raise CorruptCheckpointError(f"{path}: {len(r.raw) - r.pos} unexpected trailing bytes")

    cfg = TrainingConfig.from_dict(header["config"])
    params: dict[str, dict[str, np.ndarray]] = {}
    moments: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    for name, a in arrays.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            n, _, k = rest.partition("/")
            params.setdefault(n, {})[k] = a
        elif kind in ("adam_m", "adam_v"):
            n, _, k = rest.partition("/")
            moments.setdefault(n, {}).setdefault(k, [None, None])[0 if kind == "adam_m" else 1] = a
    stats = {}
    for tag in ("x", "y"):
        extra = header[f"stats_{tag}"]
        stats[tag] = features.NormStats(
            arrays[f"stats/{tag}/mcep_mean"], arrays[f"stats/{tag}/mcep_std"], extra["logf0_mean"], extra["logf0_std"]
        )
    ckpt = Checkpoint(
        iteration=int(header["iteration"]),
        config=cfg,
        q=int(header["q"]),
        params=params,
        moments={n: {k: (mv[0], mv[1]) for k, mv in ms.items()} for n, ms in moments.items()},
        rng_state=header["rng_state"],
        stats_x=stats["x"],
        stats_y=stats["y"],
    )
    if expect is not None:
        check_architecture(ckpt, expect)
    return ckpt
