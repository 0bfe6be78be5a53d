"""Create and inspect line-model checkpoints.

Usage: python -m ssltr.tools.model describe CKPT
       python -m ssltr.tools.model init --head "Linear(512)" --out CKPT [--config FILE]
"""

import argparse
import json
import logging
import sys

from ssltr.backbone import (
    HeadSpec,
    LineModel,
    checkpoint_digest,
    describe,
    load_checkpoint,
    save_checkpoint,
)
from ssltr.errors import SsltrError
from ssltr.tools import (
    add_common_arguments,
    add_config_arguments,
    config_from_args,
    setup_logging,
)
from ssltr.training import set_seed

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="Line model checkpoints")
add_common_arguments(parser)
commands = parser.add_subparsers(dest="command", required=True)

describe_parser = commands.add_parser("describe", help="Print architecture and parameter count")
describe_parser.add_argument("checkpoint", metavar="CKPT")

init_parser = commands.add_parser("init", help="Write a freshly initialized model")
add_config_arguments(init_parser)
init_parser.add_argument("--head", default="Linear(512)", help='e.g. "MLP(3, 2048)"')
init_parser.add_argument("--seed", type=int, default=0)
init_parser.add_argument("--out", metavar="CKPT", required=True)


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        if args.command == "describe":
            model, extra = load_checkpoint(args.checkpoint)
            print(describe(model))
            print(f"sha256: {checkpoint_digest(args.checkpoint)}")
            if extra:
                print(f"extra: {json.dumps(extra, sort_keys=True, default=str)}")
        elif args.command == "init":
            config = config_from_args(args)
            set_seed(args.seed)
            model = LineModel(config.model.model_config(HeadSpec.parse(args.head)))
            save_checkpoint(args.out, model, {"phase": "init", "seed": args.seed})
            log.info("Wrote %s", args.out)
    except (SsltrError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
