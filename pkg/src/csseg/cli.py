"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 missing input,
4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cnn import NumericError
from .config import ConfigError, deviations, load_config, set_dotted, validate
from .pipeline import (FoldPlan, MissingInputError, corpus_ids, generate_corpus,
                       run_crossval, run_evaluate, run_label, run_oversegment,
                       run_segment, run_train_cascade, run_train_cnn,
                       run_train_patch_rf, write_overlays)
from .volume import VolumeFormatError, load_mask, load_volume

logger = logging.getLogger("csseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config field by dotted path")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--workers", type=int, default=None, help="parallel worker count")
    p.add_argument("--framework", choices=["f1", "f2"], default="f1")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csseg",
                                 description="Bottom-up volumetric segmentation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantoms", help="generate a seeded synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 16], metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    _add_common(p)

    p = sub.add_parser("oversegment", help="superpixel maps for corpus volumes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ids", default=None, help="comma-separated volume ids (default: all)")
    p.add_argument("--out", required=True)
    _add_common(p)

    for name, help_text in (("train-patch-rf", "KDE table + patch labeler for one fold"),
                            ("train-cnn", "convnet patch labeler for one fold"),
                            ("train-cascade", "stage-1/stage-2 cascade for one fold")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--plan", required=True, help="fold plan JSON (from crossval)")
        p.add_argument("--fold", type=int, required=True)
        p.add_argument("--out", required=True, help="run directory holding fold_<k>/")
        _add_common(p)

    p = sub.add_parser("label", help="dense RF probability maps")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fold-dir", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("segment", help="segment volumes with a trained fold")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fold-dir", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("evaluate", help="overlap metrics of predictions vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    _add_common(p)

    p = sub.add_parser("crossval", help="full cross-validation protocol")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("overlay", help="contour overlay images")
    p.add_argument("--volume", required=True)
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--slice", default="all", help="slice index or 'all'")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    _add_common(p)

    return ap


def _config_from_args(args) -> "PipelineConfig":
    cfg = load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects PATH=VALUE, got {item!r}")
        path, raw = item.split("=", 1)
        set_dotted(cfg, path, raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    validate(cfg)
    for note in deviations(cfg):
        logger.info("config note: %s", note)
    return cfg


def _ids_arg(args, corpus=None) -> list[str]:
    if getattr(args, "ids", None):
        return args.ids.split(",")
    return corpus_ids(corpus if corpus is not None else args.corpus)


def _load_plan(path) -> FoldPlan:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"missing fold plan {p}")
    return FoldPlan.from_json(p.read_text())


def run(args) -> int:
    cfg = _config_from_args(args)
    cmd = args.command
    if cmd == "phantoms":
        ids = generate_corpus(args.n, args.out, cfg.seed, dims=tuple(args.dims),
                              spacing=tuple(args.spacing))
        print(f"wrote {len(ids)} phantoms to {args.out}")
    elif cmd == "oversegment":
        ids = _ids_arg(args)
        run_oversegment(args.corpus, ids, cfg, args.out)
        print(f"oversegmented {len(ids)} volumes")
    elif cmd == "train-patch-rf":
        run_train_patch_rf(args.corpus, _load_plan(args.plan), args.fold, cfg, args.out)
        print(f"fold {args.fold}: KDE table and patch labeler written")
    elif cmd == "train-cnn":
        run_train_cnn(args.corpus, _load_plan(args.plan), args.fold, cfg, args.out)
        print(f"fold {args.fold}: convnet written")
    elif cmd == "train-cascade":
        run_train_cascade(args.corpus, _load_plan(args.plan), args.fold, cfg,
                          args.framework, args.out)
        print(f"fold {args.fold}: cascade {args.framework} written")
    elif cmd == "label":
        ids = _ids_arg(args)
        run_label(args.corpus, args.fold_dir, ids, cfg, args.out)
        print(f"labeled {len(ids)} volumes")
    elif cmd == "segment":
        ids = _ids_arg(args)
        run_segment(args.corpus, args.fold_dir, args.framework, ids, cfg, args.out)
        print(f"segmented {len(ids)} volumes")
    elif cmd == "evaluate":
        report = run_evaluate(args.pred, args.gt, _ids_arg(args, corpus=args.gt),
                              args.out, args.csv)
        agg = report.aggregates()["dice"]
        print(f"mean dice {agg['mean']:.4f} (std {agg['std']:.4f}) over {len(report.rows)} volumes")
    elif cmd == "crossval":
        doc = run_crossval(args.corpus, args.out, cfg, args.framework)
        agg = doc["aggregates"]["dice"]
        print(f"{args.framework}: mean dice {agg['mean']:.4f} (std {agg['std']:.4f}) "
              f"over {len(doc['volumes'])} volumes")
    elif cmd == "overlay":
        vol = load_volume(args.volume)
        pred = load_mask(args.pred) if args.pred else None
        gt = load_mask(args.gt) if args.gt else None
        if pred is None and gt is None:
            raise ConfigError("overlay needs --pred and/or --gt")
        written = write_overlays(vol, pred, gt, args.slice, args.out, args.scale)
        print(f"wrote {len(written)} overlay images")
    else:  # pragma: no cover
        raise ConfigError(f"unknown command {cmd}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, VolumeFormatError, FileNotFoundError) as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
