"""Self-supervised pre-training of a line model.

Usage: python -m ssltr.tools.pretrain masked --corpus MANIFEST --labels LABELS --out DIR
       python -m ssltr.tools.pretrain joint --criterion vicreg --corpus MANIFEST --out DIR
       python -m ssltr.tools.pretrain --help

Both commands read the model, schedule scale and pre-training options from ``--config``.
"""

import argparse
import logging
import math
import sys
from pathlib import Path

from ssltr.backbone import HeadSpec, LineModel, save_checkpoint
from ssltr.config import write_config
from ssltr.dataset import load_manifest, split
from ssltr.errors import SsltrError
from ssltr.labelgen import LabelManifest
from ssltr.pretrain import JointConfig, default_crop_width, train_joint, train_masked
from ssltr.schedule import schedule_from_table
from ssltr.tools import (
    add_common_arguments,
    add_config_arguments,
    config_from_args,
    setup_logging,
)
from ssltr.training import MetricsStream, select_device, set_seed
from ssltr.types import Criterion, Phase

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="Self-supervised pre-training")
add_common_arguments(parser)
commands = parser.add_subparsers(dest="command", required=True)

masked_parser = commands.add_parser("masked", help="Masked label prediction")
add_config_arguments(masked_parser)
masked_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
masked_parser.add_argument("--labels", metavar="LABELS", required=True)
masked_parser.add_argument(
    "--heldout", type=int, default=64, help="Lines held out for top-k errors"
)
masked_parser.add_argument("--out", metavar="DIR", required=True)

joint_parser = commands.add_parser("joint", help="VICReg or NT-Xent on shifted views")
add_config_arguments(joint_parser)
joint_parser.add_argument(
    "--criterion", choices=[c.value for c in Criterion], default=Criterion.VICREG.value
)
joint_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
joint_parser.add_argument(
    "--no-shift",
    dest="shift",
    action="store_false",
    default=None,
    help="Crop both views at the same position",
)
joint_parser.add_argument(
    "--probe", type=int, default=16, help="Lines held out for the collapse probe"
)
joint_parser.add_argument("--out", metavar="DIR", required=True)


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        config = config_from_args(args)
        out = Path(args.out)
        write_config(config, out)
        device = select_device(config.training.device)
        t, p = config.training, config.pretrain
        corpus = load_manifest(args.corpus, workers=config.data.workers)
        set_seed(config.seed)

        if args.command == "masked":
            labels = LabelManifest.load(args.labels)
            train, heldout = split(corpus, min(args.heldout, len(corpus) // 8), config.seed)
            schedule = schedule_from_table(Phase.MASKED, t.scale, t.batch_scale, t.max_batch)
            model = LineModel(config.model.model_config(HeadSpec.linear(labels.k)))
            with MetricsStream(out / "metrics.jsonl") as metrics:
                model, _ = train_masked(
                    model,
                    train,
                    labels,
                    schedule,
                    p=p.mask_probability,
                    seed=config.seed,
                    heldout=heldout,
                    metrics=metrics,
                    checkpoint_dir=out,
                    device=device,
                    prefetch=t.prefetch,
                    log_every=t.log_every,
                    progress=t.progress,
                )
            phase = Phase.MASKED
        else:
            criterion = Criterion(args.criterion)
            phase = Phase(criterion.value)
            schedule = schedule_from_table(phase, t.scale, t.batch_scale, t.max_batch)
            joint_config = JointConfig(
                criterion=criterion,
                temperature=p.temperature,
                crop_width=p.crop_width or default_crop_width(config.synth.style),
                crop_width_doubling_step=math.ceil(100_000 * t.scale),
                shift=p.shift if args.shift is None else args.shift,
            )
            train, probe = split(corpus, min(args.probe, len(corpus) // 8), config.seed)
            model = LineModel(config.model.model_config(schedule.head))
            with MetricsStream(out / "metrics.jsonl") as metrics:
                model, _ = train_joint(
                    model,
                    train,
                    schedule,
                    joint_config,
                    seed=config.seed,
                    probe=probe.images if len(probe) >= 2 else None,
                    augmentation=config.augmentation_for(
                        p.augmentation or schedule.augmentation
                    ),
                    metrics=metrics,
                    checkpoint_dir=out,
                    device=device,
                    prefetch=t.prefetch,
                    log_every=t.log_every,
                    progress=t.progress,
                )
        path = save_checkpoint(out / "pretrained.pt", model, {"phase": phase.value})
        log.info("Wrote %s", path)
    except (SsltrError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
