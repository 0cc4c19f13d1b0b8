"""Command-line entry point: ``cyclevc {synth,train,convert,evaluate,gradcheck}``.

Inputs that fail validation exit with status 1 before anything expensive
runs. Failures after that point exit with 2.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config, features, gradcheck, metrics, synth, training
from .conversion import DIRECTIONS, Converter

log = logging.getLogger("cyclevc")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
FEATURE_SUFFIX = ".mcp"


class ValidationError(Exception):
    """Bad user input, detected before any expensive work."""


def _setup_logging() -> None:
    name = os.environ.get("CYCLEVC_LOG", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ValidationError(f"CYCLEVC_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise ValidationError(f"synth spec not found: {spec_path}")
    try:
        spec = synth.SynthSpec.from_text(spec_path.read_text())
        if args.seed is not None:
            spec.seed = args.seed
        corpus = synth.generate(spec)
    except synth.SynthSpecError as e:
        raise ValidationError(str(e)) from None
    manifests = synth.write_corpus(corpus, args.out)
    for key, p in manifests.items():
        print(f"{key}\t{p}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def _load_corpus(manifest: Path) -> training.Corpus:
    paths = config.read_manifest(manifest)
    return training.Corpus.from_sequences([features.read_features(p) for p in paths])


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    try:
        run = config.load_run_config(args.config, overrides)
        qx = config.manifest_dimension(config.read_manifest(run.train_x))
        qy = config.manifest_dimension(config.read_manifest(run.train_y))
    except (config.ConfigError, config.ManifestError, features.FeatureFileError) as e:
        raise ValidationError(str(e)) from None
    if qx != qy:
        raise ValidationError(f"speakers disagree on feature dimension: train_x Q={qx}, train_y Q={qy}")
    resume = None
    if args.resume is not None:
        try:
            resume = training.load_checkpoint(args.resume, expect=run.training)
        except (training.CheckpointError, OSError) as e:
            raise ValidationError(str(e)) from None

    cx, cy = _load_corpus(run.train_x), _load_corpus(run.train_y)
    crop = run.training.crop_frames
    for tag, c in (("train_x", cx), ("train_y", cy)):
        if not any(s.shape[1] >= crop for s in c.sequences):
            raise ValidationError(f"{tag}: no sequence has at least crop_frames={crop} frames")

    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(run.to_text())
    log_file = out / "loss_log.csv"
    if resume is None:
        trainer = training.Trainer(cx, cy, run.training)
        log_file.write_text("")
    else:
        trainer = training.Trainer.resume(resume, cx, cy)
        _truncate_log(log_file, trainer.iteration)
    trainer.stats_x.save(out / "stats_x.txt")
    trainer.stats_y.save(out / "stats_y.txt")
    log.info("training %d iterations from %d -> %s", run.training.iterations, trainer.iteration, out)
    trainer.run(out_dir=out, log_file=log_file)
    print(out / "final.cvc2")
    return EXIT_OK


def _truncate_log(path: Path, iteration: int) -> None:
    """Keep the rows of iterations that precede a resumed checkpoint."""
    if not path.is_file():
        return
    rows = [r for r in path.read_text().splitlines() if r and int(r.split(",", 1)[0]) < iteration]
    path.write_text("".join(r + "\n" for r in rows))


# -- convert -------------------------------------------------------------------


def _conversion_jobs(src: Path, out: Path) -> list[tuple[Path, Path]]:
    if src.is_dir():
        inputs = sorted(p for p in src.iterdir() if p.suffix == FEATURE_SUFFIX)
        if not inputs:
            raise ValidationError(f"no {FEATURE_SUFFIX} files in {src}")
        return [(p, out / p.name) for p in inputs]
    if not src.is_file():
        raise ValidationError(f"input not found: {src}")
    return [(src, out / src.name if out.is_dir() else out)]


def cmd_convert(args) -> int:
    try:
        ckpt = training.load_checkpoint(args.checkpoint)
        converter = Converter.from_checkpoint(ckpt, args.direction)
    except (training.CheckpointError, OSError, ValueError) as e:
        raise ValidationError(str(e)) from None
    jobs = _conversion_jobs(Path(args.input), Path(args.out))
    try:
        for src, _ in jobs:
            q, _t = features.read_header(src)
            if q != converter.q:
                raise ValidationError(f"{src}: Q={q} but the checkpoint expects Q={converter.q}")
    except features.FeatureFileError as e:
        raise ValidationError(str(e)) from None
    if Path(args.input).is_dir():
        Path(args.out).mkdir(parents=True, exist_ok=True)
    for src, dst in jobs:
        x = features.read_features(src)
        y = converter(x)
        features.write_features(dst, y)
        if args.differential:
            features.write_features(_differential_path(dst), features.differential_mceps(x, y))
        log.debug("converted %s -> %s", src, dst)
    log.info("converted %d file(s) direction %s", len(jobs), args.direction)
    return EXIT_OK


def _differential_path(dst: Path) -> Path:
    return dst.with_name(dst.stem + ".diff" + dst.suffix)


# -- evaluate ------------------------------------------------------------------


def read_pairs(path: Path) -> list[tuple[str, str]]:
    """Pairing manifest lines ``converted_name target_name`` (one name means both)."""
    if not path.is_file():
        raise ValidationError(f"pairing manifest not found: {path}")
    pairs = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 2:
            raise ValidationError(f"{path}:{n}: expected 'converted [target]'")
        pairs.append((parts[0], parts[-1]))
    if not pairs:
        raise ValidationError(f"pairing manifest {path} lists no pairs")
    return pairs


def evaluate_pairs(conv_dir: Path, tgt_dir: Path, pairs: list[tuple[str, str]]):
    """Per-pair (name, mcd, msd) rows and the two summaries; rejects orphans first."""
    listed_conv = {c for c, _ in pairs}
    present = {p.name for p in conv_dir.iterdir() if p.suffix == FEATURE_SUFFIX and ".diff" not in p.suffixes}
    problems = [f"unpaired converted file: {n}" for n in sorted(present - listed_conv)]
    problems += [f"missing converted file: {c}" for c in sorted(listed_conv - present)]
    problems += [f"missing target file: {t}" for _, t in pairs if not (tgt_dir / t).is_file()]
    if problems:
        raise ValidationError("orphan files:\n  " + "\n  ".join(problems))
    rows = []
    for c, t in pairs:
        x, y = features.read_features(conv_dir / c), features.read_features(tgt_dir / t)
        rows.append((c, metrics.mcd_utterance(x, y), metrics.msd(x, y)))
    return rows, metrics.summarize(r[1] for r in rows), metrics.summarize(r[2] for r in rows)


def format_report(rows, mcd: metrics.MetricSummary, msd: metrics.MetricSummary) -> str:
    lines = ["utterance,mcd_db,msd_db"]
    lines += [f"{name},{a!r},{b!r}" for name, a, b in rows]
    lines.append(f"mean+/-std,{mcd.mean!r}+/-{mcd.std!r},{msd.mean!r}+/-{msd.std!r}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    conv_dir, tgt_dir = Path(args.converted), Path(args.target)
    for d in (conv_dir, tgt_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    pairs = read_pairs(Path(args.pairs))
    try:
        report = format_report(*evaluate_pairs(conv_dir, tgt_dir, pairs))
    except (features.FeatureFileError, ValueError) as e:
        raise ValidationError(str(e)) from None
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all()
    width = max(len(n) for n in results)
    print(f"{'op':<{width}}  max_rel_error  status")
    failed = 0
    for name, err in results.items():
        ok = bool(np.isfinite(err)) and err < gradcheck.TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  {err:13.3e}  {'pass' if ok else 'FAIL'}")
    return EXIT_OK if not failed else EXIT_FAILED


# -- wiring --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclevc", description="Non-parallel feature conversion with cycle-consistent adversarial networks.")
    parser.add_argument("--seed", type=int, default=None, help="override the configured random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-speaker corpus")
    p.add_argument("spec", help="key = value synthetic corpus spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="continue from a checkpoint of the same run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert feature files with a trained checkpoint")
    p.add_argument("input", help="feature file or directory of .mcp files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=DIRECTIONS, default="xy")
    p.add_argument("--differential", action="store_true", help="also write converted minus source")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="MCD and MSD of converted files against targets")
    p.add_argument("converted")
    p.add_argument("target")
    p.add_argument("pairs", help="lines of 'converted_name [target_name]'")
    p.add_argument("--out", default=None, help="also write the CSV report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        _setup_logging()
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_FAILED
    except Exception as e:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
