"""Command-line interface.

Every subcommand works inside one artifact directory (``--out-dir``) so the
stages compose: ``synth`` writes the corpus and query split, ``simulate``
the click log, ``pretrain``/``finetune`` the checkpoints, ``ensemble`` the
boosted tree model and its scores, and ``experiment`` chains everything and
writes the comparison report.  Exit codes: 1 for usage errors, 2 for bad
data or unreadable files, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import DataError, NumericError
from .evaluation import evaluate_run, format_report, write_report
from .corpus import read_relevance_file
from .neural.checkpoint import load_checkpoint
from .pipeline import (
    ExperimentSettings,
    load_corpus,
    load_settings,
    read_scores,
    run_experiment,
    stage_clicklog,
    stage_ensemble,
    stage_features,
    stage_finetune,
    stage_pretrain,
    stage_scores,
    stage_synth,
    variant_name,
)
from .pretrain import IPW_KINDS, LOSS_KINDS

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse's default usage-error exit code is 2; this CLI reserves
    2 for data errors, so usage problems exit with 1 instead."""

    def error(self, message: str):  # noqa: D401 - argparse override
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ultrank", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out-dir", type=Path, required=True, help="artifact directory")
        p.add_argument("--config", type=Path, default=None, help="INI settings file")
        p.add_argument("--seed", type=int, default=None, help="override the settings seed")
        p.add_argument("--threads", type=int, default=None, help="evaluation thread count")

    common(sub.add_parser("synth", help="generate corpus, truth, and the query split"))
    common(sub.add_parser("features", help="extract classic text features"))
    common(sub.add_parser("simulate", help="simulate a position-biased click log"))

    p = sub.add_parser("pretrain", help="pretrain one scorer variant on the click log")
    common(p)
    p.add_argument("--loss", choices=LOSS_KINDS, default="listwise_log")
    p.add_argument("--ipw", choices=IPW_KINDS, default="none")

    p = sub.add_parser("finetune", help="fine-tune a pretrained variant on annotations")
    common(p)
    p.add_argument("--loss", choices=LOSS_KINDS, default="listwise_log")
    p.add_argument("--ipw", choices=IPW_KINDS, default="none")

    p = sub.add_parser("score", help="score every truth pair with a fine-tuned variant")
    common(p)
    p.add_argument("--loss", choices=LOSS_KINDS, default="listwise_log")
    p.add_argument("--ipw", choices=IPW_KINDS, default="none")

    common(sub.add_parser("ensemble", help="train the boosted ensemble and score the held-out split"))

    p = sub.add_parser("evaluate", help="rank quality of score files against a truth file")
    p.add_argument("--qrels", type=Path, required=True, help="relevance file to judge against")
    p.add_argument(
        "--scores",
        action="append",
        required=True,
        metavar="NAME=PATH",
        help="named score file; repeat for several runs",
    )
    p.add_argument("--k", type=int, default=10, help="rank cutoff (default 10)")
    p.add_argument("--out", type=Path, default=None, help="write the table here instead of stdout")
    p.add_argument("--threads", type=int, default=None)

    common(sub.add_parser("experiment", help="run every stage and write report.txt"))
    return parser


def _settings(args: argparse.Namespace) -> ExperimentSettings:
    settings = load_settings(args.config)
    if args.seed is not None:
        settings = replace(settings, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        settings = replace(settings, threads=args.threads)
    return settings


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} is missing; run `ultrank {hint}` first")
    return path


def _load_variant_scorer(out_dir: Path, stage: str, name: str, hint: str):
    path = _require(out_dir / f"{stage}_{name}.npz", hint)
    scorer, _, _ = load_checkpoint(path)
    return scorer


def _cmd_pretrain(args: argparse.Namespace) -> None:
    settings = _settings(args)
    from .clicklog import read_click_log

    _require(args.out_dir / "corpus.tsv", "synth --out-dir " + str(args.out_dir))
    sessions = read_click_log(_require(args.out_dir / "clicklog.tsv", "simulate"))
    corpus = load_corpus(args.out_dir)
    stage_pretrain(settings, args.out_dir, args.loss, args.ipw, corpus, sessions)


def _cmd_finetune(args: argparse.Namespace) -> None:
    settings = _settings(args)
    name = variant_name(args.loss, args.ipw)
    _require(args.out_dir / "corpus.tsv", "synth")
    corpus = load_corpus(args.out_dir)
    scorer = _load_variant_scorer(args.out_dir, "pretrain", name, "pretrain")
    _require(args.out_dir / "annotations.tsv", "synth")
    stage_finetune(settings, args.out_dir, name, scorer, corpus)


def _cmd_score(args: argparse.Namespace) -> None:
    name = variant_name(args.loss, args.ipw)
    corpus = load_corpus(args.out_dir)
    scorer = _load_variant_scorer(args.out_dir, "finetune", name, "finetune")
    stage_scores(args.out_dir, name, scorer, corpus)


def _cmd_ensemble(args: argparse.Namespace) -> None:
    settings = _settings(args)
    features = stage_features(args.out_dir)
    variant_scores = {}
    for loss, ipw in settings.variants:
        name = variant_name(loss, ipw)
        path = _require(args.out_dir / f"scores_{name}.tsv", "score")
        variant_scores[name] = read_scores(path)
    stage_ensemble(settings, args.out_dir, features, variant_scores)


def _cmd_evaluate(args: argparse.Namespace) -> None:
    truth = read_relevance_file(args.qrels)
    triples = [(q, d, g) for (q, d), g in sorted(truth.items())]
    reports = []
    for item in args.scores:
        if "=" not in item:
            raise DataError(f"--scores expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        scores = read_scores(path)
        reports.append(
            evaluate_run(scores, triples, k=args.k, run_id=name, threads=args.threads or 1)
        )
    if args.out is None:
        sys.stdout.write(format_report(reports))
    else:
        write_report(args.out, reports)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            out = args.out_dir
            out.mkdir(parents=True, exist_ok=True)
            stage_synth(_settings(args), out)
        elif args.command == "features":
            _require(args.out_dir / "corpus.tsv", "synth")
            stage_features(args.out_dir)
        elif args.command == "simulate":
            _require(args.out_dir / "corpus.tsv", "synth")
            stage_clicklog(_settings(args), args.out_dir)
        elif args.command == "pretrain":
            _cmd_pretrain(args)
        elif args.command == "finetune":
            _cmd_finetune(args)
        elif args.command == "score":
            _cmd_score(args)
        elif args.command == "ensemble":
            _cmd_ensemble(args)
        elif args.command == "evaluate":
            _cmd_evaluate(args)
        elif args.command == "experiment":
            report = run_experiment(_settings(args), args.out_dir)
            with open(report, encoding="utf-8") as fh:
                sys.stdout.write(fh.read())
        else:  # pragma: no cover - argparse enforces the choices
            raise DataError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"ultrank: numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"ultrank: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ultrank: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
