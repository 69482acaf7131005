"""Command-line entry point: phantom generation, training, inference and evaluation.

Exit codes: 0 success, 2 configuration or contract error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .augment import DEFAULT_ALPHA, MixupConfig
from .dataio import CaseManifest, PhantomConfig, read_volume, write_corpus, write_volume
from .errors import ConfigurationError, ContractError, DimensionError, FormatError
from .harness import (
    MetricsReport,
    TrainConfig,
    case_dsc,
    crossval_ladder,
    fold_split,
    load_checkpoint,
    permutation_test,
    predict_case,
    report_table,
    save_checkpoint,
    train,
)
from .harness.crossval import METHODS
from .harness.training import MODES
from .losses import DEFAULT_PAIR_WEIGHT
from .netblocks import PathConfig

log = logging.getLogger("hpnseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def corpus_seeds(seed: int, n: int) -> List[int]:
    """Per-case phantom seeds of corpus ``seed``."""
    return [seed * 10_000 + i for i in range(n)]


def _dims(values: Sequence[int]):
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise ConfigurationError("--dims takes one or three integers")


def _train_config(args, mode: str) -> TrainConfig:
    return TrainConfig(
        mode=mode,
        patch=args.patch,
        lr=args.lr,
        momentum=args.momentum,
        iterations=args.iters,
        batch_size=args.batch_size,
        pair_weight=args.lambda_pair,
        mixup=MixupConfig(alpha=args.alpha_mixup, enabled=not args.no_mixup),
        seed=args.seed,
        backbone=PathConfig(depth=args.depth, base_channels=args.base_channels),
    )


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lambda-pair", type=float, default=DEFAULT_PAIR_WEIGHT)
    p.add_argument("--alpha-mixup", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--no-mixup", action="store_true")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)


def cmd_phantom_gen(args) -> int:
    cfg = PhantomConfig(dims=_dims(args.dims), noise_sigma=args.noise)
    manifest = write_corpus(args.out, corpus_seeds(args.seed, args.cases), cfg)
    print(f"wrote {len(manifest)} cases to {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args, args.mode)
    manifest = CaseManifest.read(args.manifest)
    if args.test_fold is None:
        ids = set(manifest.ids())
    else:
        split = fold_split(manifest.ids(), args.fold)
        if not 0 <= args.test_fold < args.fold:
            raise ConfigurationError(f"--test-fold must lie in 0..{args.fold - 1}")
        ids = set(split.train_ids(args.test_fold))
    cases = [manifest.load(i) for i, c in enumerate(manifest.ids()) if c in ids]

    def progress(it, bd):
        if it % args.log_every == 0:
            log.info("iter %d ce %.4f corr %.4f total %.4f", it, bd.ce, bd.corr, bd.total)

    model = train(cfg, cases, progress=progress)
    save_checkpoint(model, args.out)
    print(f"checkpoint {args.out} digest {model.digest()}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = CaseManifest.read(args.manifest)
    wanted = args.case or manifest.ids()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cid in wanted:
        if cid not in manifest.ids():
            raise ConfigurationError(f"case {cid!r} not in manifest")
        case = manifest.load(manifest.ids().index(cid))
        _, pred = predict_case(model, case, stride=args.stride)
        write_volume(pred, out / f"{cid}_pred.mpv")
        print(out / f"{cid}_pred.mpv")
    return EXIT_OK


def cmd_eval(args) -> int:
    scores = case_dsc(read_volume(args.truth), read_volume(args.pred))
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def _write_reports(reports: Dict[str, MetricsReport], path: Path) -> None:
    payload = {m: json.loads(r.to_json()) for m, r in reports.items()}
    path.write_text(json.dumps(payload, indent=1) + "\n")


def _read_reports(path) -> Dict[str, MetricsReport]:
    try:
        raw = json.loads(Path(path).read_text())
        return {m: MetricsReport.from_json(json.dumps(r)) for m, r in raw.items()}
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise FormatError(f"{path} is not a metrics file: {exc}", 0) from None


def cmd_xval(args) -> int:
    cfg = _train_config(args, "hpn")
    manifest = CaseManifest.read(args.manifest)
    reports = crossval_ladder(manifest, cfg, args.mode, n_folds=args.fold, stride=args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_reports(reports, out / "metrics.json")
    table = report_table(list(reports.items()))
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    reports: Dict[str, MetricsReport] = {}
    for path in args.inputs:
        reports.update(_read_reports(path))
    print(report_table(list(reports.items())), end="")
    if args.against:
        if args.against not in reports:
            raise ConfigurationError(f"unknown method {args.against!r}")
        ref = reports[args.against]
        for name, rep in reports.items():
            if name == args.against:
                continue
            for s in rep.scores:
                p = permutation_test(ref.scores[s], rep.scores[s])
                print(f"p({args.against} vs {name}, {s}) = {p:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpnseg", description="Dual-phase pancreatic segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic paired-phase corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=30)
    p.add_argument("--dims", type=int, nargs="+", default=[32])
    p.add_argument("--noise", type=float, default=PhantomConfig.noise_sigma)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train one mode on a manifest")
    p.add_argument("--mode", choices=MODES, default="hpn")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=3, help="number of folds")
    p.add_argument("--test-fold", type=int, default=None, help="held-out fold; omit to train on every case")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict label maps with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--case", nargs="*", default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-structure DSC of one prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xval", help="cross-validate one or more methods")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", nargs="+", choices=sorted(METHODS), default=["hpn"])
    p.add_argument("--fold", type=int, default=3)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_train_options(p)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("report", help="tabulate metrics files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--against", default=None, help="method compared to every other by permutation test")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
