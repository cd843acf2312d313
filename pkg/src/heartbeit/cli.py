"""Command-line entry point: ``heartbeit <subcommand> --config run.json``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .config import PipelineConfig
from .errors import ArgumentError, ConfigError, HeartBeitError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "HEARTBEIT_THREADS"


def _fraction_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated fractions, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="JSON config file (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; may repeat")
    common.add_argument("--force", action="store_true", help="accept artifacts produced under another config hash")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="heartbeit", description="ECG image pre-training pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="write a synthetic labeled ECG corpus")
    p.add_argument("-n", "--n-records", type=int)
    p.add_argument("--seed", type=int)
    sub.add_parser("validate", parents=[common], help="check manifest, waveforms and labels")
    sub.add_parser("prepare", parents=[common], help="render records into the image cache")
    sub.add_parser("tokenizer", parents=[common], help="train the patch codebook")
    sub.add_parser("pretrain", parents=[common], help="masked-token pre-training")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune classifiers over training fractions")
    p.add_argument("--init", choices=("pretrained", "random"), default="pretrained",
                   help="'pretrained' requires the pre-training checkpoint")
    p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated seeds")
    p.add_argument("--fractions", type=_fraction_list)

    p = sub.add_parser("evaluate", parents=[common], help="tabulate AUROC/AUPRC per variant and fraction")
    p.add_argument("--scores", type=Path, help="evaluate a standalone record_id,score,label CSV")

    p = sub.add_parser("saliency", parents=[common], help="Grad-CAM overlays for a fine-tuned model")
    p.add_argument("--init", choices=("pretrained", "random"), default="pretrained")
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=float, default=1.0)

    sub.add_parser("wasserstein", parents=[common], help="pixel-intensity distances between cohorts")
    return parser


def load_config(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.command == "synthesize":
        if args.n_records is not None:
            overrides.append(f"synthesize.n_records={args.n_records}")
        if args.seed is not None:
            overrides.append(f"synthesize.seed={args.seed}")
    if args.config is not None:
        return PipelineConfig.load(args.config, overrides)
    cfg = PipelineConfig.default(Path.cwd())
    cfg.apply(overrides)
    return cfg


def _run(args, cfg: PipelineConfig) -> None:
    cmd = args.command
    if cmd == "synthesize":
        manifest = pipeline.run_synthesize(cfg)
        print(f"wrote {len(manifest)} records to {cfg.path('data_dir')}")
    elif cmd == "validate":
        summary = pipeline.run_validate(cfg)
        print("ok: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
    elif cmd == "prepare":
        res = pipeline.run_prepare(cfg)
        print(f"cache {res.cache}: {res.rendered} rendered, {res.reused} reused")
    elif cmd == "tokenizer":
        cb = pipeline.run_tokenizer(cfg, args.force)
        print(f"codebook {pipeline.codebook_path(cfg)}: {cb.vocab_size} tokens of dim {cb.patch_dim}")
    elif cmd == "pretrain":
        res = pipeline.run_pretrain(cfg, args.force)
        s = res.record.summary
        print(f"pretrain loss {s['first_epoch_loss']:.4f} -> {s['final_epoch_loss']:.4f}; "
              f"checkpoint {pipeline.pretrain_path(cfg)}")
    elif cmd == "finetune":
        for seed in args.seeds or [None]:
            sweep = pipeline.run_finetune(cfg, args.init, seed, args.fractions, args.force)
            for f, entry in sorted(sweep.items()):
                r = entry.report
                print(f"{args.init} seed={entry.result.record.seed} {pipeline.fraction_tag(f)}: "
                      f"AUROC {r.auroc:.4f} AUPRC {r.auprc:.4f} (best epoch {entry.result.best_epoch})")
    elif cmd == "evaluate":
        print(pipeline.run_evaluate(cfg, args.scores, args.force), end="")
    elif cmd == "saliency":
        s = pipeline.run_saliency(cfg, args.init, args.seed, args.fraction, args.force)
        print(f"saliency: {s['n_localized']}/{s['n_annotated']} annotated positives localized")
    elif cmd == "wasserstein":
        r = pipeline.run_wasserstein(cfg, args.force)
        print(f"W1 ecg-ecg {r['ecg_ecg']:.4f}  ecg-noise {r['ecg_noise']:.4f}  noise-noise {r['noise_noise']:.4f}")


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        limiter = _thread_limit()
        print(f"config hash {cfg.config_hash()}")
        try:
            _run(args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigError, ArgumentError) as exc:
        print(f"heartbeit {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HeartBeitError as exc:
        print(f"heartbeit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"heartbeit {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
