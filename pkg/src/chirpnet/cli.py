"""Command line front end: synth, extract, train, evaluate, predict.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/unreadable/mismatched inputs), 3 numeric divergence during
training. Logs go to stderr; tabular data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .audio import AudioError, chunk, decode_wav, resample
from .config import (
    ConfigError,
    PipelineConfig,
    apply_overrides,
    format_config,
    load_config,
)
from .dataset import (
    CorpusError,
    load_ground_truth,
    load_noise_pool,
    save_label_map,
    scan_corpus,
    split,
)
from .inference import ensemble, mlrap, predict_recording, top_k_rows
from .model import CheckpointError, build_baseline, load_checkpoint
from .signal_filter import classify_chunk
from .spectrogram import extract as extract_spectrogram
from .spectrogram import filterbank_for, save_bspc
from .synth import generate_corpus
from .training import DivergenceError, TrainConfig, train

log = logging.getLogger("chirpnet")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message: str):  # noqa: D102
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable; wins over --config)",
    )
    p.add_argument(
        "--print-config", action="store_true",
        help="print the effective configuration and exit",
    )


def _effective_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config is not None:
        cfg = load_config(args.config, base=cfg)
    overrides: dict[str, str] = {}
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        if key.strip() in overrides:
            raise ConfigError(f"--set repeats key {key.strip()!r}")
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides)


def _parse_snr(text: str) -> float:
    if text.strip().lower() in ("-inf", "-infinity"):
        return float("-inf")
    return float(text)


def cmd_synth(args: argparse.Namespace) -> int:
    summary = generate_corpus(
        n_classes=args.classes,
        files_per_class=args.files_per_class,
        duration_s=args.duration,
        snr_db=args.snr,
        seed=args.seed,
        out_dir=args.out,
    )
    log.info(
        "wrote %d recordings in %d classes plus %d noise files under %s",
        summary.n_recordings, len(summary.classes),
        summary.n_noise_files, summary.root,
    )
    return EXIT_OK


def _extract_one(
    wav_path: Path, rel_source: str, is_noise_source: bool,
    out_root: Path, cfg: PipelineConfig, bank,
) -> list[tuple[str, float, float, str, str]]:
    """Chunk one recording and write routed .bspc files; returns manifest rows."""
    buf = decode_wav(wav_path)
    if buf.sample_rate != cfg.spectrogram.sample_rate:
        buf = resample(buf, cfg.spectrogram.sample_rate)
    rows = []
    pieces = chunk(buf, cfg.spectrogram.chunk_seconds, cfg.spectrogram.chunk_seconds)
    for idx, piece in enumerate(pieces):
        spec = extract_spectrogram(piece, cfg.spectrogram, bank)
        decision = classify_chunk(
            spec,
            threshold=cfg.filter.threshold,
            row_factor=cfg.filter.row_factor,
            col_factor=cfg.filter.col_factor,
        )
        accepted = decision.accepted and not is_noise_source
        sub = Path(rel_source).parent if accepted else Path("noise")
        out_path = out_root / sub / f"{wav_path.stem}_c{idx:03d}.bspc"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_bspc(out_path, spec)
        rows.append(
            (
                rel_source,
                piece.source_offset,
                decision.score,
                "accept" if accepted else "reject",
                str(out_path.relative_to(out_root)),
            )
        )
    return rows


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    in_root: Path = args._in
    out_root: Path = args.out
    if not in_root.is_dir():
        raise CorpusError(f"input directory not found: {in_root}")
    wavs = sorted(in_root.rglob("*.wav"))
    if not wavs:
        raise CorpusError(f"no .wav files under {in_root}")
    out_root.mkdir(parents=True, exist_ok=True)
    bank = filterbank_for(cfg.spectrogram)

    def job(wav_path: Path):
        rel = wav_path.relative_to(in_root).as_posix()
        is_noise = rel.split("/", 1)[0] == "noise"
        return _extract_one(wav_path, rel, is_noise, out_root, cfg, bank)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            all_rows = list(pool.map(job, wavs))
    else:
        all_rows = [job(w) for w in wavs]

    manifest = out_root / "manifest.tsv"
    n_accept = 0
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        for rows in all_rows:
            for source, offset, score, verdict, out_path in rows:
                n_accept += verdict == "accept"
                fh.write(
                    f"{source}\t{offset:.3f}\t{score:.6f}\t{verdict}\t{out_path}\n"
                )
    total = sum(len(r) for r in all_rows)
    log.info(
        "extracted %d chunks from %d recordings (%d accepted, %d to noise pool); "
        "manifest at %s", total, len(wavs), n_accept, total - n_accept, manifest,
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    index = scan_corpus(args.corpus)
    model_cfg = replace(
        cfg.model,
        n_classes=index.n_classes,
        in_channels=1,
        input_rows=cfg.spectrogram.n_mels,
        input_cols=cfg.spectrogram.n_cols,
    )
    train_cfg: TrainConfig = cfg.train
    train_idx, val_idx = split(index, train_cfg.val_fraction, train_cfg.seed)
    log.info(
        "corpus: %d classes, %d train / %d val samples, %d noise spectrograms",
        index.n_classes, len(train_idx.samples), len(val_idx.samples),
        len(index.noise_pool),
    )
    model = build_baseline(model_cfg, class_names=index.classes, seed=train_cfg.seed)
    noise_pool = load_noise_pool(index) if train_cfg.augment else []
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_label_map(out_dir / "label_map.csv", index.classes)
    report = train(
        model, train_idx, val_idx, train_cfg, out_dir,
        noise_pool=noise_pool, aug_cfg=cfg.augment,
    )
    log.info(
        "best epoch %d (checkpoint %s); %d snapshots; report at %s",
        report.best_epoch, report.best_checkpoint,
        len(report.snapshot_paths), out_dir / "train_report.csv",
    )
    return EXIT_OK


def _load_models(paths: list[Path]):
    models = []
    for p in paths:
        model, _ = load_checkpoint(p)
        models.append(model)
    first = models[0]
    for m in models[1:]:
        if m.class_names != first.class_names:
            raise CheckpointError("checkpoints disagree on the class list")
    return models


def _predict_scores(models, wav_path: Path, cfg: PipelineConfig, bank,
                    snr_filter: bool):
    preds = [
        predict_recording(
            m, wav_path, cfg.spectrogram,
            snr_filter=snr_filter, snr_threshold=cfg.filter.threshold,
            pool=cfg.pool_mode, bank=bank,
        )
        for m in models
    ]
    return ensemble([p.pooled_scores for p in preds]), preds


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    corpus: Path = args.corpus
    gt_path = corpus / "ground_truth.csv"
    if not gt_path.is_file():
        raise CorpusError(f"ground truth file not found: {gt_path}")
    truth = load_ground_truth(gt_path)
    models = _load_models(args.checkpoints)
    class_ids = {name: i for i, name in enumerate(models[0].class_names)}
    wav_by_stem = {p.stem: p for p in sorted(corpus.rglob("*.wav"))}
    bank = filterbank_for(cfg.spectrogram)

    rec_ids = sorted(truth.foreground)
    missing = [r for r in rec_ids if r not in wav_by_stem]
    if missing:
        raise CorpusError(f"recordings named in ground truth not found: {missing[:5]}")
    label_sets = []
    for rec_id in rec_ids:
        names = truth.label_set(rec_id)
        unknown = [n for n in names if n not in class_ids]
        if unknown:
            raise CorpusError(
                f"ground truth labels not in the model class list: {unknown}"
            )
        label_sets.append([class_ids[n] for n in names])

    def job(rec_id: str):
        scores, _ = _predict_scores(
            models, wav_by_stem[rec_id], cfg, bank, args.snr_filter
        )
        return scores

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            all_scores = list(pool.map(job, rec_ids))
    else:
        all_scores = [job(r) for r in rec_ids]

    value = mlrap(all_scores, label_sets)
    top1 = float(
        np.mean(
            [int(np.argmax(s)) == ls[0] for s, ls in zip(all_scores, label_sets)]
        )
    )
    log.info("evaluated %d recordings with %d model(s); top-1 %.4f",
             len(rec_ids), len(models), top1)
    print(f"MLRAP={value:.4f}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    target: Path = args._in
    if target.is_dir():
        wavs = sorted(target.rglob("*.wav"))
        if not wavs:
            raise CorpusError(f"no .wav files under {target}")
    elif target.is_file():
        wavs = [target]
    else:
        raise CorpusError(f"input not found: {target}")
    models = _load_models(args.checkpoints)
    bank = filterbank_for(cfg.spectrogram)
    class_names = models[0].class_names

    def job(wav_path: Path):
        scores, preds = _predict_scores(models, wav_path, cfg, bank, args.snr_filter)
        merged = replace(preds[0], pooled_scores=scores)
        return top_k_rows(merged, class_names, k=args.top_k, normalize=args.normalize)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            all_rows = list(pool.map(job, wavs))
    else:
        all_rows = [job(w) for w in wavs]

    out_fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out_fh)
        writer.writerow(["recording_id", "class_name", "score"])
        for rows in all_rows:
            for rec_id, class_name, score in rows:
                writer.writerow([rec_id, class_name, repr(score)])
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="chirpnet", description=__doc__)
    parser.add_argument(
        "--version", action="version",
        version=(
            f"chirpnet {__version__} (python {sys.version.split()[0]}, "
            f"numpy {np.__version__})"
        ),
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug-level logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic chirp corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--files-per-class", type=int, default=50)
    p.add_argument("--duration", type=float, default=2.0, help="seconds per recording")
    p.add_argument("--snr", type=_parse_snr, default=10.0,
                   help="signal-to-noise ratio in dB; -inf for noise only")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="recordings to routed spectrogram chunks")
    p.add_argument("--in", dest="_in", type=Path, required=True,
                   help="recording tree: <class>/*.wav plus optional noise/")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train on an extracted spectrogram corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MLRAP of checkpoint(s) on a recording corpus")
    p.add_argument("--corpus", type=Path, required=True,
                   help="directory with recordings and ground_truth.csv")
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    p.add_argument("--snr-filter", action="store_true",
                   help="drop low-signal chunks before pooling")
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-recording ranked class scores")
    p.add_argument("--in", dest="_in", type=Path, required=True,
                   help="a .wav file or a directory of them")
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--normalize", action="store_true",
                   help="scale scores so the best class reads 1.0")
    p.add_argument("--snr-filter", action="store_true")
    p.add_argument("--out", type=Path, default=None, help="CSV path (default stdout)")
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (AudioError, CorpusError, CheckpointError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
