"""Synthetic corpora and manifest subsets.

Usage: python -m ssltr.tools.dataset synth --style printed --lines 512 --out DIR
       python -m ssltr.tools.dataset subset MANIFEST --n 100 --out DIR
       python -m ssltr.tools.dataset split MANIFEST --heldout 64 --out DIR
       python -m ssltr.tools.dataset --help
"""

import argparse
import logging
import sys
from pathlib import Path

from ssltr.dataset import load_manifest, split, subset, synth_corpus, write_manifest
from ssltr.errors import SsltrError
from ssltr.tools import add_common_arguments, setup_logging
from ssltr.types import Style

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="Text-line corpus utilities")
add_common_arguments(parser)
commands = parser.add_subparsers(dest="command", required=True)

synth_parser = commands.add_parser("synth", help="Render a synthetic corpus")
synth_parser.add_argument(
    "--style", choices=[s.value for s in Style], default=Style.PRINTED.value
)
synth_parser.add_argument("--lines", type=int, required=True, help="Number of lines")
synth_parser.add_argument("--seed", type=int, default=0)
synth_parser.add_argument("--name", default=None, help="Corpus name (defaults to the style)")
synth_parser.add_argument("--out", metavar="DIR", required=True)

subset_parser = commands.add_parser("subset", help="Deterministic n-line subset")
subset_parser.add_argument("manifest", metavar="MANIFEST")
subset_parser.add_argument("--n", type=int, required=True)
subset_parser.add_argument("--seed", type=int, default=0)
subset_parser.add_argument("--out", metavar="DIR", required=True)

split_parser = commands.add_parser("split", help="Split off held-out lines")
split_parser.add_argument("manifest", metavar="MANIFEST")
split_parser.add_argument("--heldout", type=int, required=True)
split_parser.add_argument("--seed", type=int, default=0)
split_parser.add_argument(
    "--out", metavar="DIR", required=True, help="Writes DIR/rest and DIR/heldout"
)


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        if args.command == "synth":
            corpus = synth_corpus(args.name or args.style, args.style, args.lines, args.seed)
            write_manifest(corpus, args.out)
        elif args.command == "subset":
            corpus = load_manifest(args.manifest)
            write_manifest(subset(corpus, args.n, args.seed), args.out)
        elif args.command == "split":
            corpus = load_manifest(args.manifest)
            rest, heldout = split(corpus, args.heldout, args.seed)
            write_manifest(rest, Path(args.out) / "rest")
            write_manifest(heldout, Path(args.out) / "heldout")
    except (SsltrError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    log.info("Finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())
