"""Diagnostic panels.

Usage: python -m ssltr.tools.viz recon AE_CKPT --corpus MANIFEST --out DIR
       python -m ssltr.tools.viz neighbors CKPT --corpus MANIFEST --out DIR [--n 8]
       python -m ssltr.tools.viz trigrams --labels LABELS --corpus MANIFEST \
           --line ID --position P --out FILE
"""

import argparse
import logging
import sys
from pathlib import Path

from ssltr.augment import AugmentationSet
from ssltr.backbone import load_checkpoint
from ssltr.dataset import load_manifest, subset
from ssltr.errors import SsltrError
from ssltr.labelgen import LabelManifest, load_autoencoder
from ssltr.tools import add_common_arguments, setup_logging
from ssltr.training import select_device
from ssltr.viz import (
    CONTEXT_MARGIN,
    DEFAULT_NEIGHBORS,
    dump_neighbors,
    dump_reconstructions,
    dump_trigram_matches,
    nearest_neighbor_patches,
    trigram_matches,
)

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="Diagnostic visualizations")
add_common_arguments(parser)
parser.add_argument("--device", default=None)
commands = parser.add_subparsers(dest="command", required=True)

recon_parser = commands.add_parser("recon", help="Original above reconstruction")
recon_parser.add_argument("checkpoint", metavar="AE_CKPT")
recon_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
recon_parser.add_argument("--lines", type=int, default=8)
recon_parser.add_argument("--seed", type=int, default=0)
recon_parser.add_argument("--out", metavar="DIR", required=True)

neighbors_parser = commands.add_parser(
    "neighbors", help="Most similar outputs between two augmented batches"
)
neighbors_parser.add_argument("checkpoint", metavar="CKPT")
neighbors_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
neighbors_parser.add_argument("--batch", type=int, default=16, help="Lines per batch")
neighbors_parser.add_argument("--n", type=int, default=DEFAULT_NEIGHBORS)
neighbors_parser.add_argument("--margin", type=int, default=CONTEXT_MARGIN)
neighbors_parser.add_argument("--seed", type=int, default=0)
neighbors_parser.add_argument("--out", metavar="DIR", required=True)

trigram_parser = commands.add_parser("trigrams", help="Image parts sharing a label trigram")
trigram_parser.add_argument("--labels", metavar="LABELS", required=True)
trigram_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
trigram_parser.add_argument("--line", metavar="ID", required=True)
trigram_parser.add_argument("--position", type=int, required=True)
trigram_parser.add_argument("--max-hits", type=int, default=16)
trigram_parser.add_argument("--margin", type=int, default=CONTEXT_MARGIN)
trigram_parser.add_argument("--out", metavar="FILE", required=True)


def neighbors(args, device):
    model, _ = load_checkpoint(args.checkpoint, device)
    corpus = load_manifest(args.corpus)
    lines = subset(corpus, min(args.batch, len(corpus)), args.seed).images
    aug = AugmentationSet.visual()
    batch_a = [aug.apply(image, args.seed * 7919 + 2 * i) for i, image in enumerate(lines)]
    batch_b = [aug.apply(image, args.seed * 7919 + 2 * i + 1) for i, image in enumerate(lines)]
    panels = nearest_neighbor_patches(
        model, batch_a, batch_b, args.n, args.seed, args.margin, device
    )
    for panel in panels:
        log.info(
            "%s frame %d: top similarity %.3f",
            panel.query.line_id,
            panel.query.start,
            panel.similarities[0],
        )
    dump_neighbors(panels, args.out)


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        device = select_device(args.device)
        if args.command == "recon":
            model = load_autoencoder(args.checkpoint, device)
            corpus = load_manifest(args.corpus)
            lines = subset(corpus, min(args.lines, len(corpus)), args.seed)
            dump_reconstructions(model, lines, args.out, device)
        elif args.command == "neighbors":
            neighbors(args, device)
        elif args.command == "trigrams":
            manifest = LabelManifest.load(args.labels)
            corpus = load_manifest(args.corpus)
            regions = trigram_matches(
                manifest, corpus, args.line, args.position, args.max_hits, args.margin
            )
            log.info("%d matches", len(regions))
            dump_trigram_matches(regions, Path(args.out))
    except (SsltrError, ValueError, KeyError, OSError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
