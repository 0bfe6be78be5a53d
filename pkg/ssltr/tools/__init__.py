"""Command-line entry points, each runnable as ``python -m ssltr.tools.<name>``."""

import argparse
import logging

from ssltr.config import ExperimentConfig, load_config
from ssltr.types import AugKind

log = logging.getLogger(__name__)


def add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Log debug messages"
    )
    parser.add_argument(
        "--quiet", action="store_true", help="Hide progress bars"
    )


def add_config_arguments(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--config", metavar="FILE", default=None, help="Experiment config (YAML)"
    )
    parser.add_argument(
        "--set",
        metavar="KEY=VALUE",
        dest="overrides",
        action="append",
        default=[],
        help="Override a config value, e.g. pretrain.k=32 (repeatable)",
    )
    parser.add_argument(
        "--aug",
        choices=[k.value for k in AugKind],
        default=None,
        help="Augmentation kind used for pre-training",
    )
    parser.add_argument(
        "--device", default=None, help="Torch device (overridden by $SSLTR_DEVICE)"
    )


def setup_logging(args: argparse.Namespace):
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def config_from_args(args: argparse.Namespace, check_paths: bool = False) -> ExperimentConfig:
    overrides = list(args.overrides)
    if getattr(args, "device", None):
        overrides.append(f"training.device={args.device}")
    if getattr(args, "quiet", False):
        overrides.append("training.progress=false")
    return load_config(args.config, overrides, args.aug, check_paths)
