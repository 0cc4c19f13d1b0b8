"""Flat ``key = value`` run configuration and feature-file manifests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import features
from .training import TrainingConfig


class ConfigError(ValueError):
    """Invalid configuration text or values."""


class ManifestError(ValueError):
    """A manifest is missing or lists no usable files."""


_RUN_KEYS = ("train_x", "train_y", "out_dir")


@dataclass
class RunConfig:
    training: TrainingConfig
    train_x: Path
    train_y: Path
    out_dir: Path = field(default_factory=lambda: Path("run"))

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)}" for k in _RUN_KEYS]
        lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in self.training.to_dict().items()]
        return "\n".join(lines) + "\n"


def _convert(name: str, raw: str, kind):
    if kind is bool:
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(raw)
        return raw.lower() in ("true", "1")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        out[k] = v
    return out


def parse_run_config(text: str, base_dir=None, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    """Parse a run configuration; relative paths resolve against ``base_dir``."""
    values = parse_key_values(text, source)
    types = {f.name: type(f.default) for f in fields(TrainingConfig)}
    unknown = sorted(set(values) - set(types) - set(_RUN_KEYS))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    missing = [k for k in ("train_x", "train_y") if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s) {', '.join(missing)}")
    kw = {}
    for k, raw in values.items():
        if k in _RUN_KEYS:
            continue
        try:
            kw[k] = _convert(k, raw, types[k])
        except ValueError:
            raise ConfigError(f"{source}: bad value for {k}: {raw!r} (expected {types[k].__name__})") from None
    kw.update(overrides or {})
    try:
        cfg = TrainingConfig(**kw)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def path(k, default=None):
        p = Path(values.get(k, default))
        return p if p.is_absolute() else (base / p).resolve()

    return RunConfig(cfg, path("train_x"), path("train_y"), path("out_dir", "run"))


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_run_config(p.read_text(), p.parent, str(p), overrides)


def read_manifest(path) -> list[Path]:
    """Paths listed one per line; blank lines and '#' comments are skipped."""
    p = Path(path)
    if not p.is_file():
        raise ManifestError(f"manifest not found: {p}")
    entries = []
    for line in p.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            q = Path(line)
            entries.append(q if q.is_absolute() else (p.parent / q).resolve())
    if not entries:
        raise ManifestError(f"manifest {p} lists no files")
    absent = [str(e) for e in entries if not e.is_file()]
    if absent:
        raise ManifestError(f"manifest {p}: {len(absent)} missing file(s), e.g. {absent[0]}")
    return entries


def manifest_dimension(paths: list[Path]) -> int:
    """Shared Q of the listed feature files (headers only)."""
    qs = {}
    for p in paths:
        q, _ = features.read_header(p)
        qs.setdefault(q, p)
    if len(qs) != 1:
        detail = ", ".join(f"Q={q} ({p.name})" for q, p in qs.items())
        raise ManifestError(f"feature files disagree on dimension: {detail}")
    return next(iter(qs))


def replace_training(run: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(run, training=dataclasses.replace(run.training, **changes))
