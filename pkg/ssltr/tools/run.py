"""Run a complete experiment: pre-train, fine-tune on every budget, evaluate.

Usage: python -m ssltr.tools.run --config configs/example.yaml
       python -m ssltr.tools.run --config FILE --set method=vicreg --set training.scale=0.001
       python -m ssltr.tools.run --print-config --config FILE
"""

import argparse
import logging
import sys

from ssltr.config import dump_config
from ssltr.errors import SsltrError
from ssltr.experiment import StageFailed, format_summary, run_experiment
from ssltr.tools import (
    add_common_arguments,
    add_config_arguments,
    config_from_args,
    setup_logging,
)

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="Pre-train and fine-tune experiment runner")
add_common_arguments(parser)
add_config_arguments(parser)
parser.add_argument(
    "--print-config",
    action="store_true",
    help="Print the resolved config and exit",
)


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        config = config_from_args(args, check_paths=True)
    except (SsltrError, OSError) as e:
        log.error("%s", e)
        return 2
    if args.print_config:
        print(dump_config(config), end="")
        return 0
    try:
        result = run_experiment(config)
    except StageFailed as e:
        log.error("%s; partial results are in %s", e, config.run_dir)
        return 1
    print(format_summary(result.rows))
    log.info("Results in %s", result.run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
