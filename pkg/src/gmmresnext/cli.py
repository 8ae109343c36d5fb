"""Command-line entry point: ``gmmresnext <command> --workdir DIR [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/invalid inputs, stale artifacts), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import pipeline as pl
from .dataio import DataError
from .pipeline import ConfigError, Workspace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workdir", "-w", required=True, help="work directory (holds config.json and artifacts)")
    common.add_argument("--config", help="JSON run config; replaces the work directory's config.json")
    common.add_argument("--profile", choices=sorted(pl.PROFILES), default="desk",
                        help="defaults used when the work directory has no config yet")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gmmresnext", description="GMM-ResNext speaker verification pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus, manifests and trials")
    p.add_argument("--seed", type=int)
    p.add_argument("--speakers", type=int)
    p.add_argument("--train-utts", type=int)
    p.add_argument("--eval-utts", type=int)

    sub.add_parser("extract-mfcc", parents=[common], help="MFCC + mean normalization for every utterance")

    p = sub.add_parser("train-gmm", parents=[common], help="fit the UBM and/or gender GMMs on training MFCCs")
    p.add_argument("--components", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--kinds", type=_csv, default=list(pl.GMM_KINDS), help="subset of ubm,male,female")

    p = sub.add_parser("extract-lgp", parents=[common], help="normalized LGP features from trained GMMs")
    p.add_argument("--kinds", type=_csv, help="default: every GMM present in the work directory")

    for name, choices, default, text in (("train", pl.SINGLE_VARIANTS, "base", "train a single-path model"),
                                         ("train-dual", pl.DUAL_VARIANTS, "dual", "train the dual-path model")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--variant", choices=choices, default=default)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)

    for name, text in (("embed", "embed evaluation utterances"), ("score", "cosine-score the trial list"),
                       ("eval", "EER/minDCF report from scores")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--variant", choices=pl.VARIANTS, default="base")

    p = sub.add_parser("ablate", parents=[common], help="run base plus ablation variants and tabulate")
    p.add_argument("--variants", type=_csv, default=["no_gmm", "no_mfa", "no_2s"])
    p.add_argument("--no-synth", action="store_true", help="reuse the corpus named in the config paths")

    p = sub.add_parser("run", parents=[common], help="full pipeline: synth-data through eval")
    p.add_argument("--variant", choices=pl.VARIANTS, default="base")
    p.add_argument("--no-synth", action="store_true", help="reuse the corpus named in the config paths")
    return parser


def _apply_overrides(ws: Workspace, args) -> None:
    cfg = ws.cfg
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides("seed", seed=args.seed)
    data = {k: v for k, v in (("n_speakers", getattr(args, "speakers", None)),
                              ("train_utts", getattr(args, "train_utts", None)),
                              ("eval_utts", getattr(args, "eval_utts", None))) if v is not None}
    if data:
        cfg = cfg.with_overrides("data", **data)
    gmm = {k: v for k, v in (("n_components", getattr(args, "components", None)),
                             ("n_iters", getattr(args, "iters", None))) if v is not None}
    if gmm:
        cfg = cfg.with_overrides("gmm", **gmm)
    train = {k: v for k, v in (("epochs", getattr(args, "epochs", None)),
                               ("batch_size", getattr(args, "batch_size", None))) if v is not None}
    if train:
        cfg = cfg.with_overrides("train", **train)
    if cfg != ws.cfg:
        ws.update(cfg)


def _check_kinds(kinds) -> list:
    bad = [k for k in kinds if k not in pl.GMM_KINDS]
    if bad or not kinds:
        raise ConfigError(f"--kinds must be a non-empty subset of {','.join(pl.GMM_KINDS)}")
    return kinds


def _dispatch(args) -> int:
    ws = Workspace.open(args.workdir, args.config, args.profile)
    _apply_overrides(ws, args)
    cmd = args.command
    if cmd == "synth-data":
        entries = pl.synth_data(ws)
        print(f"wrote {len(entries)} utterances to {ws.root / 'data'}")
    elif cmd == "extract-mfcc":
        print(f"extracted MFCCs for {pl.extract_mfcc(ws)} utterances")
    elif cmd == "train-gmm":
        pl.train_gmm(ws, _check_kinds(args.kinds))
        print(f"trained GMMs: {','.join(args.kinds)} ({ws.cfg.gmm.n_components} components)")
    elif cmd == "extract-lgp":
        kinds = args.kinds or [k for k in pl.GMM_KINDS if ws.gmm_path(k).exists()]
        if not kinds:
            raise DataError("no trained GMMs found (run train-gmm)")
        print(f"extracted LGP features for {pl.extract_lgp(ws, _check_kinds(kinds))} utterances")
    elif cmd in ("train", "train-dual"):
        history = pl.train_model(ws, args.variant)
        last = history[-1]
        print(f"{args.variant}: {len(history)} epochs, final loss {last.mean_loss:.4f}, accuracy {last.accuracy:.3f}")
    elif cmd == "embed":
        print(f"embedded {len(pl.embed(ws, args.variant))} utterances")
    elif cmd == "score":
        print(f"scored {len(pl.score(ws, args.variant))} trials")
    elif cmd == "eval":
        _print_report(pl.evaluate(ws, args.variant))
    elif cmd == "run":
        _print_report(pl.run_pipeline(ws, (args.variant,), synth=not args.no_synth)[0])
    elif cmd == "ablate":
        table = pl.ablate(ws, args.variants, synth=not args.no_synth)
        print(pl.format_table(table["rows"]), end="")
    return EXIT_OK


def _print_report(report: dict) -> None:
    brief = {k: report[k] for k in ("variant", "eer", "min_dcf", "n_target", "n_nontarget", "config_hash")}
    print(json.dumps(brief, indent=2))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"gmmresnext: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"gmmresnext: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"gmmresnext: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
