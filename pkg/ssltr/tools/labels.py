"""Codebooks, autoencoders and frame label manifests.

Usage: python -m ssltr.tools.labels fit-kmeans --encoder CKPT --corpus MANIFEST --out CODEBOOK
       python -m ssltr.tools.labels train-ae --corpus MANIFEST [--vq --codebook N] --out CKPT
       python -m ssltr.tools.labels generate --method fq --corpus MANIFEST \
           --encoder CKPT --codebook CODEBOOK --out LABELS
"""

import argparse
import logging
import sys

from ssltr.backbone import load_checkpoint, read_payload
from ssltr.dataset import load_manifest, split
from ssltr.errors import SsltrError
from ssltr.labelgen import (
    AEConfig,
    LabelAssets,
    codebook_usage,
    KMEANS_CLASSES,
    default_codebook_size,
    extract_features,
    fit_kmeans,
    generate_labels,
    load_autoencoder,
    reconstruction_mse,
    sample_fit_set,
    save_autoencoder,
    train_autoencoder,
)
from ssltr.schedule import schedule_from_table
from ssltr.tools import (
    add_common_arguments,
    add_config_arguments,
    config_from_args,
    setup_logging,
)
from ssltr.training import MetricsStream, select_device
from ssltr.types import LabelMethod, Phase

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="Pseudo-label generation")
add_common_arguments(parser)
commands = parser.add_subparsers(dest="command", required=True)

kmeans_parser = commands.add_parser("fit-kmeans", help="Cluster frame features")
add_config_arguments(kmeans_parser)
kmeans_parser.add_argument(
    "--encoder",
    metavar="CKPT",
    required=True,
    help="Line model or autoencoder checkpoint",
)
kmeans_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
kmeans_parser.add_argument(
    "--k",
    type=int,
    default=None,
    help=f"Clusters (defaults to pretrain.k, then to {KMEANS_CLASSES})",
)
kmeans_parser.add_argument("--seed", type=int, default=0)
kmeans_parser.add_argument(
    "--features",
    metavar="FILE",
    default=None,
    help="Also write the extracted feature store",
)
kmeans_parser.add_argument("--out", metavar="CODEBOOK", required=True)

ae_parser = commands.add_parser("train-ae", help="Train an AE or VQ-VAE")
add_config_arguments(ae_parser)
ae_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
ae_parser.add_argument(
    "--vq", action="store_true", help="Quantized bottleneck (VQ-VAE)"
)
ae_parser.add_argument(
    "--codebook",
    type=int,
    default=None,
    help="Codebook size (defaults to pretrain.k, then to the style's VQ-VAE size)",
)
ae_parser.add_argument(
    "--heldout", type=int, default=32, help="Lines held out for reconstruction MSE"
)
ae_parser.add_argument("--seed", type=int, default=0)
ae_parser.add_argument("--metrics", metavar="FILE", default=None)
ae_parser.add_argument("--out", metavar="CKPT", required=True)

generate_parser = commands.add_parser("generate", help="Write a label manifest")
add_config_arguments(generate_parser)
generate_parser.add_argument(
    "--method", choices=[m.value for m in LabelMethod], required=True
)
generate_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
generate_parser.add_argument("--encoder", metavar="CKPT", default=None)
generate_parser.add_argument("--autoencoder", metavar="CKPT", default=None)
generate_parser.add_argument("--codebook", metavar="CODEBOOK", default=None)
generate_parser.add_argument("--out", metavar="LABELS", required=True)


def load_encoder(path):
    if read_payload(path).get("kind") == "autoencoder":
        return load_autoencoder(path)
    return load_checkpoint(path)[0]


def cluster_count(args, config) -> int:
    return args.k or config.pretrain.k or KMEANS_CLASSES


def codebook_size(args, config) -> int:
    return args.codebook or config.pretrain.k or default_codebook_size(config.synth.style)


def fit(args, config, corpus, device):
    k = cluster_count(args, config)
    store = extract_features(
        load_encoder(args.encoder),
        corpus,
        device=device,
        progress=config.training.progress,
    )
    if args.features:
        store.save(args.features)
    codebook = fit_kmeans(
        sample_fit_set(store, k, args.seed),
        k,
        config.pretrain.kmeans_epochs,
        seed=args.seed,
        normalize=config.pretrain.kmeans_normalize,
    )
    codebook.save(args.out)
    log.info("Codebook of %d centroids, inertia %.4g", codebook.k, codebook.inertia)


def train_ae(args, config, corpus, device):
    train, heldout = split(corpus, min(args.heldout, len(corpus) // 2), args.seed)
    t, p = config.training, config.pretrain
    schedule = schedule_from_table(Phase.AE, t.scale, t.batch_scale, t.max_batch)
    with MetricsStream(args.metrics) as metrics:
        model = train_autoencoder(
            train,
            args.vq,
            codebook_size(args, config),
            schedule,
            AEConfig(p.ae_latent_dim, p.ae_width, commitment=p.commitment),
            seed=args.seed,
            heldout=heldout,
            metrics=metrics,
            max_width=p.ae_max_width,
            augmentation=config.augmentation_for(
                p.augmentation or schedule.augmentation
            ),
            device=device,
            log_every=t.log_every,
            progress=t.progress,
        )
    save_autoencoder(args.out, model)
    if len(heldout):
        mse = reconstruction_mse(model, heldout, device=device)
        log.info("Held-out reconstruction MSE %.5f", mse)
        if model.quantized:
            used = int((codebook_usage(model, heldout, device=device) > 0).sum())
            log.info(
                "%d of %d codewords used on held-out lines",
                used,
                model.config.codebook_size,
            )


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        config = config_from_args(args)
        device = select_device(config.training.device)
        corpus = load_manifest(args.corpus, workers=config.data.workers)
        if args.command == "fit-kmeans":
            fit(args, config, corpus, device)
        elif args.command == "train-ae":
            train_ae(args, config, corpus, device)
        elif args.command == "generate":
            assets = LabelAssets.from_files(args.encoder, args.codebook, args.autoencoder)
            generate_labels(
                args.method,
                corpus,
                assets,
                args.out,
                device=device,
                progress=config.training.progress,
            )
    except (SsltrError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
