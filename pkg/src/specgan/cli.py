"""Command-line entry point: ``specgan <subcommand> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure, 4 file-system error.  Set ``SPECGAN_OUTPUT_ROOT`` to redirect
default output locations.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from specgan.config import ALL_STRATEGIES, CLASSICAL_STRATEGIES, ExperimentConfig
from specgan.dataset import SpectrogramCorpus, build_corpus, load_clip, load_manifest
from specgan.errors import NumericalError, ShapeError, ValidationError
from specgan.evaluation import (
    CvReport,
    FeatureExtractor,
    GanAugmenter,
    LeakageError,
    NoAugmentation,
    PolicyAugmenter,
    relative_improvement,
    run_cv_experiment,
    train_feature_extractor,
)

logger = logging.getLogger("specgan")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
WAVEFORM_STRATEGIES = ("white_noise", "pitch_shift", "time_stretch")
DISPLAY_NAMES = {
    "none": "No augmentation",
    "white_noise": "White noise",
    "pitch_shift": "Pitch shift",
    "time_stretch": "Time stretch",
    "spec_augment": "SpecAugment",
    "cwgan_baseline": "cWGAN-GP",
    "proposed": "cWGAN-GP + SE-residual",
}


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_path(args, cfg: ExperimentConfig, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.resolved_output_root() / default


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _load_corpus(path) -> SpectrogramCorpus:
    if path is None:
        raise ValidationError("no corpus given; run `specgan preprocess` and pass --corpus")
    return SpectrogramCorpus.load(path)


def _clip_lookup(cfg: ExperimentConfig, manifest_arg=None):
    manifest_path = manifest_arg or cfg.manifest
    if manifest_path is None:
        return None
    manifest = load_manifest(manifest_path)
    by_id = {path.name: (path, label) for path, label in manifest.entries}

    def lookup(source_id: str):
        if source_id not in by_id:
            raise ValidationError(f"source {source_id!r} is not in manifest {manifest_path}")
        path, label = by_id[source_id]
        return load_clip(path, label, source_id=source_id)

    return lookup


def _resolve_generator(path) -> tuple[Path, float | None]:
    """Accept a training run directory (best checkpoint) or a checkpoint directory."""
    from specgan.training import TrainingRun

    path = Path(path)
    if (path / "fid.csv").is_file():
        run = TrainingRun.load(path)
        _, fid = run.best
        return run.best_checkpoint, fid
    arch = path / "architecture.json"
    if not arch.is_file():
        raise FileNotFoundError(f"{path} is neither a training run nor a checkpoint directory")
    return path, json.loads(arch.read_text()).get("extra", {}).get("fid")


def _augmenter(strategy: str, cfg: ExperimentConfig, checkpoints: dict, lookup):
    if strategy == "none":
        return NoAugmentation(), None
    if strategy in CLASSICAL_STRATEGIES:
        if strategy in WAVEFORM_STRATEGIES and lookup is None:
            raise ValidationError(f"{strategy} needs the source audio: set dataset.manifest or pass --manifest")
        return PolicyAugmenter(cfg.policy(strategy), lookup, strategy), None
    ckpt = checkpoints.get(strategy)
    if ckpt is None:
        flag = "--proposed" if strategy == "proposed" else "--baseline"
        variant = "" if strategy == "proposed" else " --baseline"
        raise ValidationError(
            f"strategy {strategy!r} needs a trained generator: run `specgan train-gan --corpus CORPUS{variant} "
            f"--out RUN_DIR` and pass {flag} RUN_DIR"
        )
    path, fid = _resolve_generator(ckpt)
    return GanAugmenter(path, strategy), fid


def _counts_table(corpus: SpectrogramCorpus) -> str:
    counts = corpus.per_class_counts
    width = max([len("class")] + [len(c) for c in counts])
    lines = [f"{'class':<{width}}  spectrograms", f"{'-' * width}  ------------"]
    lines += [f"{c:<{width}}  {n:>12d}" for c, n in counts.items()]
    lines.append(f"{'total':<{width}}  {len(corpus):>12d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    manifest_path = args.manifest or cfg.manifest
    if manifest_path is None:
        raise ValidationError("no manifest: pass --manifest or set dataset.manifest in the config")
    manifest = load_manifest(manifest_path)
    corpus = build_corpus(manifest, cfg.spectrogram)
    corpus.config_hash = cfg.config_hash
    path = corpus.save(_out_path(args, cfg, "corpus.spec"))
    print(_counts_table(corpus))
    print(f"wrote {path} (config {cfg.config_hash})")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    augmenter, _ = _augmenter(args.kind, cfg, {}, _clip_lookup(cfg, args.manifest))
    extra = augmenter.augment(corpus, cfg.seed)
    out = corpus.concat(extra) if args.merge else extra
    out.config_hash = cfg.config_hash
    path = out.save(_out_path(args, cfg, f"corpus_{args.kind}.spec"))
    print(_counts_table(out))
    print(f"wrote {path}")
    return EXIT_OK


def _feature_extractor(cfg: ExperimentConfig, corpus: SpectrogramCorpus, path: Path) -> FeatureExtractor:
    if (path / "extractor.json").is_file():
        logger.info("reusing feature extractor at %s", path)
        return FeatureExtractor.load(path)
    logger.info("training FID feature extractor on %d real spectrograms", len(corpus))
    extractor = train_feature_extractor(corpus, cfg.feature_extractor)
    extractor.save(path)
    _write_json(path / "provenance.json", {"config_hash": cfg.config_hash, "corpus_config_hash": corpus.config_hash})
    return extractor


def cmd_train_gan(args) -> int:
    from specgan.training import run_training

    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    _, h, w = corpus.values.shape
    if h != w:
        raise ShapeError(f"GAN models need square spectrograms, corpus has {h}x{w}")
    variant = "baseline" if args.baseline else "proposed"
    out = _out_path(args, cfg, f"gan_{variant}")
    extractor_dir = Path(args.extractor) if args.extractor else cfg.resolved_output_root() / "extractor"
    extractor = _feature_extractor(cfg, corpus, extractor_dir)
    k = len(corpus.classes)
    run = run_training(
        corpus,
        cfg.training,
        out,
        extractor,
        generator_spec=cfg.generator_spec(k, h, use_se=not args.baseline),
        critic_spec=cfg.critic_spec(k, h),
        resume=args.resume,
        extra_config={"config_hash": cfg.config_hash, "variant": variant, "extractor": str(extractor_dir)},
    )
    epoch, fid = run.best
    print(f"{variant}: best FID {fid:.4f} at epoch {epoch} -> {run.best_checkpoint}")
    return EXIT_OK


def cmd_select_model(args) -> int:
    from specgan.training import select_best_checkpoint

    run_dir = Path(args.run)
    epoch, fid, path = select_best_checkpoint(run_dir)
    cfg_file = run_dir / "config.json"
    config_hash = json.loads(cfg_file.read_text()).get("config_hash") if cfg_file.is_file() else None
    _write_json(run_dir / "best.json", {"epoch": epoch, "fid": fid, "checkpoint": str(path), "config_hash": config_hash})
    print(f"best epoch {epoch}  FID {fid:.4f}  {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    checkpoints = {"proposed": args.proposed, "cwgan_baseline": args.baseline}
    lookup = _clip_lookup(cfg, args.manifest) if args.augment in WAVEFORM_STRATEGIES else None
    augmenter, fid = _augmenter(args.augment, cfg, checkpoints, lookup)
    seed = cfg.seed
    report = run_cv_experiment(corpus, augmenter, cfg.classifier, seed=seed)
    report.fid = fid
    report.config["config_hash"] = cfg.config_hash
    path = _write_json(_out_path(args, cfg, f"report_{args.augment}.json"), report.to_dict())
    print(f"{args.augment}: macro F1 {100 * report.mean:.2f} +- {100 * report.std:.2f} %  ({path})")
    return EXIT_OK


def _format_row(strategy: str, fid, scores: list, rel) -> list[str]:
    mean, std = 100 * np.mean(scores), 100 * (np.std(scores, ddof=1) if len(scores) > 1 else 0.0)
    return [
        DISPLAY_NAMES[strategy],
        "" if fid is None else f"{fid:.2f}",
        f"{mean:.2f} ± {std:.2f}",
        "" if rel is None else f"{rel:+.2f}",
    ]


def cmd_run_table1(args) -> int:
    cfg = _config(args)
    strategies = tuple(args.strategies) if args.strategies else cfg.strategies
    unknown = set(strategies) - set(ALL_STRATEGIES)
    if unknown:
        raise ValidationError(f"unknown strategies {sorted(unknown)}; choose from {list(ALL_STRATEGIES)}")
    strategies = ("none",) + tuple(s for s in strategies if s != "none")
    corpus = _load_corpus(args.corpus)
    checkpoints = {"proposed": args.proposed, "cwgan_baseline": args.baseline}
    needs_audio = any(s in WAVEFORM_STRATEGIES for s in strategies)
    lookup = _clip_lookup(cfg, args.manifest) if needs_audio else None
    # resolve every strategy before any training so configuration errors surface first
    augmenters = {s: _augmenter(s, cfg, checkpoints, lookup) for s in strategies}

    out_dir = _out_path(args, cfg, "table1")
    reports: dict[str, list[CvReport]] = {s: [] for s in strategies}
    for seed in cfg.seeds:
        logger.info("paired folds for seed %d", seed)
        for s in strategies:
            augmenter, fid = augmenters[s]
            report = run_cv_experiment(corpus, augmenter, cfg.classifier, seed=seed)
            report.fid = fid
            report.config["config_hash"] = cfg.config_hash
            report.relative_improvement = relative_improvement(report, reports["none"][-1]) if s != "none" else 0.0
            reports[s].append(report)
            logger.info("seed %d folds %s: %s macro F1 %.4f", seed, report.fold_signature, s, report.mean)

    header = ["Method", "FID", "Macro F1 (%)", "Improvement (pp)"]
    rows = []
    for s in strategies:
        scores = [f for r in reports[s] for f in r.per_fold_f1]
        rel = None if s == "none" else float(np.mean([r.relative_improvement for r in reports[s]]))
        rows.append(_format_row(s, augmenters[s][1], scores, rel))

    out_dir.mkdir(parents=True, exist_ok=True)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    md.append("")
    md.append(f"config {cfg.config_hash}; seeds {list(cfg.seeds)}; {cfg.classifier.n_folds}-fold stratified CV")
    (out_dir / "table1.md").write_text("\n".join(md) + "\n")
    with open(out_dir / "table1.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header + ["config_hash"])
        writer.writerows(r + [cfg.config_hash] for r in rows)
    _write_json(
        out_dir / "table1.json",
        {"config_hash": cfg.config_hash, "seeds": list(cfg.seeds),
         "reports": {s: [r.to_dict() for r in reports[s]] for s in strategies}},
    )
    print("\n".join(md))
    return EXIT_OK


def cmd_analyze_redundancy(args) -> int:
    from specgan.redundancy import DEFAULT_PROBE_SIZE, compare_models

    cfg = _config(args)
    proposed, _ = _resolve_generator(args.proposed)
    baseline, _ = _resolve_generator(args.baseline)
    layers = (args.proposed_layer, args.baseline_layer) if args.proposed_layer and args.baseline_layer else None
    out = _out_path(args, cfg, "redundancy")
    res = compare_models(proposed, baseline, layers, probe_seed=cfg.seed, out_dir=out,
                         n=args.probe_size or DEFAULT_PROBE_SIZE, config_hash=cfg.config_hash,
                         extra_metadata={"proposed_checkpoint": str(proposed), "baseline_checkpoint": str(baseline)})
    print(f"redundancy proposed {res.proposed_score:.4f} ({res.proposed_layer})  "
          f"baseline {res.baseline_score:.4f} ({res.baseline_layer})  lower: {res.lower}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from specgan import plots
    from specgan.training import TrainingRun, generate_samples

    cfg = _config(args)
    run_dir = Path(args.run)
    missing = []
    if not (run_dir / "fid.csv").is_file():
        missing.append(str(run_dir / "fid.csv"))
    if args.baseline and not (Path(args.baseline) / "fid.csv").is_file():
        missing.append(str(Path(args.baseline) / "fid.csv"))
    if args.corpus and not Path(args.corpus).is_file():
        missing.append(str(args.corpus))
    redundancy_dir = Path(args.redundancy) if args.redundancy else None
    if redundancy_dir is not None:
        missing += [str(redundancy_dir / f) for f in ("correlation_proposed.csv", "correlation_baseline.csv")
                    if not (redundancy_dir / f).is_file()]
    if missing:
        raise FileNotFoundError("missing artifacts:\n  " + "\n  ".join(missing))

    out = Path(args.out) if args.out else run_dir / "plots"
    run_cfg = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").is_file() else {}
    h = run_cfg.get("config_hash") or cfg.config_hash
    runs = {"proposed": TrainingRun.load(run_dir)}
    if args.baseline:
        runs["baseline"] = TrainingRun.load(args.baseline)
    written = [plots.fid_curve({k: r.fid_history for k, r in runs.items()}, out / "fid_curve.png", h)]

    if args.corpus:
        corpus = SpectrogramCorpus.load(args.corpus)
        first = [int(np.flatnonzero(corpus.labels == k)[0]) if np.any(corpus.labels == k) else None
                 for k in range(len(corpus.classes))]
        if None in first:
            raise ValidationError("sample grid needs at least one real spectrogram per class")
        rows = {"real": corpus.values[first]}
        one_each = {c: 1 for c in corpus.classes}
        for name, run in runs.items():
            synth = generate_samples(run.best_checkpoint, one_each, cfg.seed, classes=corpus.classes)
            rows[name] = synth.values
        written.append(plots.sample_grid(rows, corpus.classes, out / "sample_grid.png", h))

    if redundancy_dir is not None:
        for which in ("proposed", "baseline"):
            values = np.loadtxt(redundancy_dir / f"correlation_{which}.csv", delimiter=",", ndmin=2)
            written.append(plots.heatmap(values, out / f"correlation_{which}.png", which, h))
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specgan", description="Spectrogram GAN augmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, seed=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(func=func)
        return p

    p = command("preprocess", cmd_preprocess, "audio manifest -> normalized spectrogram corpus", seed=False)
    p.add_argument("--manifest", help="manifest JSON or class-per-directory root")
    p.add_argument("--out", help="corpus file to write")

    p = command("augment", cmd_augment, "write one classically augmented copy of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", required=True, choices=CLASSICAL_STRATEGIES)
    p.add_argument("--manifest", help="source audio for waveform kinds")
    p.add_argument("--merge", action="store_true", help="include the original items")
    p.add_argument("--out")

    p = command("train-gan", cmd_train_gan, "train the conditional WGAN-GP with FID monitoring")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p.add_argument("--baseline", action="store_true", help="train the generator without the SE-residual stage")
    p.add_argument("--extractor", help="FID feature extractor directory (trained there if absent)")

    p = sub.add_parser("select-model", help="report the lowest-FID checkpoint of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_select_model)

    p = command("evaluate", cmd_evaluate, "stratified k-fold macro F1 for one augmentation strategy")
    p.add_argument("--corpus", required=True)
    p.add_argument("--augment", required=True, choices=ALL_STRATEGIES)
    p.add_argument("--proposed", help="run or checkpoint directory for 'proposed'")
    p.add_argument("--baseline", help="run or checkpoint directory for 'cwgan_baseline'")
    p.add_argument("--manifest")
    p.add_argument("--out", help="report JSON path")

    p = command("run-table1", cmd_run_table1, "all strategies on paired folds, as one comparison table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--strategies", nargs="+", help=f"subset of {', '.join(ALL_STRATEGIES)}")
    p.add_argument("--proposed")
    p.add_argument("--baseline")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")

    p = command("analyze-redundancy", cmd_analyze_redundancy, "channel-correlation comparison of two generators")
    p.add_argument("--proposed", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--proposed-layer")
    p.add_argument("--baseline-layer")
    p.add_argument("--probe-size", type=int)
    p.add_argument("--out")

    p = command("plot", cmd_plot, "render FID curves, sample grid and heatmaps")
    p.add_argument("--run", required=True, help="proposed-model training run")
    p.add_argument("--baseline", help="baseline training run")
    p.add_argument("--corpus", help="real corpus for the sample grid")
    p.add_argument("--redundancy", help="directory written by analyze-redundancy")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, LeakageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
