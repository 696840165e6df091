"""Operator command line: ingest, index, generate, evaluate, compare.

Exit codes: 0 success, 2 configuration error, 3 retrieval/corpus error,
4 gateway error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import RunConfig, load_config
from .errors import ConfigError, CorpusError, GatewayError, RetrievalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CORPUS = 3
EXIT_GATEWAY = 4


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    if getattr(args, "output", None):
        from pathlib import Path

        config.output_dir = Path(args.output)
    if getattr(args, "parallelism", None) is not None:
        config.parallelism = args.parallelism
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    config.validate()
    return config


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _load(args)
    summary = pipeline.run_ingest(config, kind_filter=args.kind)
    papers = summary["papers"]
    print(f"papers: {papers['accepted']} accepted, {papers['skipped']} skipped, "
          f"{len(papers['errors'])} errors")
    for err in papers["errors"]:
        print(f"  line {err['line']}: {err['message']}")
    if summary["outlines"]:
        outlines = summary["outlines"]
        print(f"outlines: {outlines['accepted']} accepted, {len(outlines['errors'])} errors")
        for err in outlines["errors"]:
            print(f"  line {err['line']}: {err['message']}")
    print(f"store: {summary['store_papers_total']} papers, "
          f"{summary['store_outlines_total']} outlines")
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    config = _load(args)
    summary = pipeline.run_index(config)
    print(f"paper index: {summary['paper_index']['entries']} entries "
          f"-> {summary['paper_index']['path']}")
    print(f"outline index: {summary['outline_index']['entries']} entries "
          f"-> {summary['outline_index']['path']}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    config = _load(args)
    result = pipeline.generate_survey(config, args.topic)
    print(f"bundle: {result.bundle_dir}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load(args)
    report = pipeline.evaluate_survey(
        config, args.survey, args.topic, bundle_dir=args.bundle
    )
    print(f"report: {report}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    config = _load(args)
    report = pipeline.compare_surveys(config, args.a, args.b, args.mode)
    print(f"report: {report}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surveygen",
        description="Retrieval-grounded survey generation and evaluation.",
    )
    parser.add_argument("-c", "--config", required=True, help="path to the INI config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate record files and merge them into the store")
    p.add_argument("--kind", choices=("research", "survey"), default=None,
                   help="only accept records of this kind")
    p.add_argument("--output", help="output directory override")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build and persist the vector indexes")
    p.add_argument("--output", help="output directory override")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("generate", help="generate a survey bundle for a topic")
    p.add_argument("--topic", required=True)
    p.add_argument("--output", help="output directory override")
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a survey against a benchmark topic")
    p.add_argument("--survey", required=True, help="rendered survey file")
    p.add_argument("--topic", required=True, help="benchmark topic id")
    p.add_argument("--bundle", default=None,
                   help="generation bundle dir (enables input coverage)")
    p.add_argument("--output", help="output directory override")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="pairwise win-rate comparison of two surveys")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mode", choices=("score", "comparative"), default="score")
    p.add_argument("--output", help="output directory override")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, RetrievalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except GatewayError as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY


if __name__ == "__main__":
    sys.exit(main())
