import argparse
import sys

from flowsolve.guidance.pigdm import GammaRule

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _common_arg_parser():
    """Options shared by every sub-command."""
    parser = argparse.ArgumentParser(add_help=False)
    common = parser.add_argument_group("Common arguments")
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="override the seed of the run config; every artifact is reproducible under it",
    )
    common.add_argument("--log-level", type=str.upper, default="INFO", choices=LOG_LEVELS)
    common.add_argument(
        "--output-dir",
        type=str,
        default=None,
        metavar="DIRECTORY",
        help="override the output directory of the run config",
    )
    return parser


def make_arg_parser(epilog=None):
    """Create the parser for the flowsolve command line.

    Parameters
    ----------
    epilog: str
        The epilog passed to ArgumentParser describing the usage.

    Returns
    -------
    parser : ArgumentParser
        The argument parser, with one sub-parser per command.
    """
    parser = argparse.ArgumentParser(
        prog="flowsolve",
        description="Training-free linear inverse problem solving with flow models.",
        epilog=epilog
        or f"""
Examples:
Solve the problem described by a run config:
    $ {sys.argv[0]} solve configs/solo/denoise_standard_normal.json
Check the guided vector field against the exact conditional one:
    $ {sys.argv[0]} compare-oracle configs/solo/inpaint_standard_normal.json
Sweep start times and step counts:
    $ {sys.argv[0]} ablate configs/solo/deblur_mixture.json --sweep configs/sweeps/t0.json
Compare two images:
    $ {sys.argv[0]} metrics recon.fsmx truth.fsmx --shape 16 16

Exit codes: 0 success, 1 oracle check failed, 2 configuration error, 3 numerical divergence.
""",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = _common_arg_parser()
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    solve_args = commands.add_parser("solve", parents=[common], help="run the solver on a run config")
    solve_args.add_argument("config", type=str, help="path to the JSON run config")

    oracle_args = commands.add_parser(
        "compare-oracle",
        parents=[common],
        help="compare the guided vector field with the exact conditional one",
    )
    oracle_args.add_argument("config", type=str, help="path to the JSON run config")
    oracle_args.add_argument("--n-probes", type=int, default=None, help="number of (x_t, t) probes")
    oracle_args.add_argument("--tolerance", type=float, default=None, help="max-norm deviation allowed")
    oracle_args.add_argument(
        "--gamma",
        type=str,
        default=None,
        choices=[rule.value for rule in GammaRule],
        help="override the guidance weight rule, 'disabled' gives the negative control",
    )

    ablate_args = commands.add_parser("ablate", parents=[common], help="run a Cartesian-product sweep")
    ablate_args.add_argument("config", type=str, help="path to the JSON run config")
    ablate_args.add_argument("--sweep", type=str, required=True, help="path to the JSON sweep spec")
    ablate_args.add_argument(
        "--threads",
        type=int,
        default=None,
        help="size of the worker pool, defaults to FLOWSOLVE_THREADS or the number of cores",
    )

    metrics_args = commands.add_parser("metrics", parents=[common], help="compute PSNR, SSIM and MSE")
    metrics_args.add_argument("a", type=str, help="reconstruction (.fsmx, .fits or .pgm)")
    metrics_args.add_argument("b", type=str, help="reference (.fsmx, .fits or .pgm)")
    metrics_args.add_argument(
        "--shape", type=int, nargs=2, default=None, metavar=("H", "W"), help="image shape used for SSIM"
    )

    return parser
