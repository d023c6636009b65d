import logging
import sys

import numpy as np

from flowsolve.cli.ablation import cmd_ablate
from flowsolve.cli.commands import (
    EXIT_CONFIG_ERROR,
    EXIT_DIVERGENCE,
    cmd_compare_oracle,
    cmd_metrics,
    cmd_solve,
)
from flowsolve.utils.exceptions import DivergenceError
from flowsolve.utils.logger import setup_logger
from flowsolve.utils.parse_arguments import make_arg_parser

logger = logging.getLogger(__name__)

COMMANDS = {
    "solve": cmd_solve,
    "compare-oracle": cmd_compare_oracle,
    "ablate": cmd_ablate,
    "metrics": cmd_metrics,
}


def main(argv=None):
    """Entry point of the ``flowsolve`` command.

    Returns
    -------
    int
        0 on success, 1 when an oracle check fails, 2 on configuration or
        input errors, 3 when the integration diverges.
    """
    args = make_arg_parser().parse_args(argv)
    setup_logger(level=args.log_level)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as err:
        logger.error(f"Numerical divergence: {err}")
        return EXIT_DIVERGENCE
    except (ValueError, ArithmeticError, OSError, KeyError, np.linalg.LinAlgError) as err:
        logger.error(f"{type(err).__name__}: {err}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
