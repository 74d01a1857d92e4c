import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from rich.console import Console
from rich.logging import RichHandler

from .. import version
from ..core.errors import ConfigError, PixdiffError
from .commands import EXIT_CONFIG, EXIT_FAILURE, cmd_analyze, cmd_forward, cmd_sample, cmd_train
from .config import BASELINES, COMPONENTS, RunConfig, load_run_config, parse_steps

logger = logging.getLogger(__name__)

Command = Callable[[RunConfig, Console], int]

HANDLERS: Dict[str, Command] = {
    "forward": cmd_forward,
    "analyze": cmd_analyze,
    "train": cmd_train,
    "sample": cmd_sample,
}

# parsed arguments that are not RunConfig fields
CONTROL_ARGS = ("command", "config", "verbose")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file of settings, or a manifest.json to replay")
    common.add_argument("--output", help="output root (default: $PIXDIFF_OUTPUT or ./pixdiff-runs)")
    common.add_argument("--seed", type=int, help="master seed of every random stream")
    common.add_argument("--gamma", type=float, help="schedule strength, must be < steps")
    common.add_argument("--steps", type=int, help="number of diffusion steps T")
    common.add_argument("--verbose", "-v", action="store_true", help="log at debug level")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixdiff", description="Pixel-value-dependent diffusion: simulate, analyze, train and sample."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {version}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    forward = sub.add_parser(
        "forward", parents=[common], argument_default=argparse.SUPPRESS, help="run the forward chain"
    )
    forward.add_argument("--image", help="clean PGM/PPM image (default: synthetic portrait)")
    forward.add_argument("--image-size", dest="image_size", type=int, help="synthetic portrait size")
    forward.add_argument("--baseline", choices=BASELINES, help="comparison schedule")
    forward.add_argument("--baseline-only", dest="baseline_only", action="store_true", help="skip the pixel-wise run")
    forward.add_argument("--beta-min", dest="beta_min", type=float)
    forward.add_argument("--beta-max", dest="beta_max", type=float)
    forward.add_argument("--copies", type=int, help="independent chains pooled into the statistics")
    forward.add_argument("--frame-stride", dest="frame_stride", type=int, help="steps between saved frames")
    forward.add_argument("--mean-tol", dest="mean_tol", type=float)
    forward.add_argument("--var-tol", dest="var_tol", type=float)

    analyze = sub.add_parser(
        "analyze", parents=[common], argument_default=argparse.SUPPRESS, help="SNR and trajectory analysis"
    )
    analyze.add_argument("--x-small", dest="x_small", type=float, help="darker pixel value")
    analyze.add_argument("--x-large", dest="x_large", type=float, help="brighter pixel value")
    analyze.add_argument("--a", type=float, help="conventional decay rate")
    analyze.add_argument("--t-min", dest="t_min", type=float)
    analyze.add_argument("--t-max", dest="t_max", type=float)
    analyze.add_argument("--grid-points", dest="grid_points", type=int)
    analyze.add_argument("--pixels", type=int, help="pixel values in the trajectory comparison")

    train = sub.add_parser(
        "train", parents=[common], argument_default=argparse.SUPPRESS, help="train the toy networks"
    )
    train.add_argument("--corpus-seed", dest="corpus_seed", type=int)
    train.add_argument("--corpus-size", dest="corpus_size", type=int)
    train.add_argument("--component", choices=COMPONENTS)
    train.add_argument("--iterations", type=int, help="scale estimator iterations")
    train.add_argument("--predictor-iterations", dest="predictor_iterations", type=int)
    train.add_argument("--learning-rate", dest="learning_rate", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    train.add_argument("--resume", help="checkpoint to continue from")

    sample = sub.add_parser(
        "sample", parents=[common], argument_default=argparse.SUPPRESS, help="one-shot reverse sampling"
    )
    sample.add_argument("--artifacts", help="directory holding the trained .pxdf files (default: <output>/train)")
    sample.add_argument("--image", help="clean PGM/PPM image (default: validation corpus)")
    sample.add_argument("--corpus-seed", dest="corpus_seed", type=int)
    sample.add_argument("--corpus-size", dest="corpus_size", type=int)
    sample.add_argument("--count", type=int, help="validation images to reconstruct")
    sample.add_argument("--from-steps", dest="from_steps", type=parse_steps, help="e.g. 5,10,20 (default: T)")
    sample.add_argument("--oracle-scale", dest="oracle_scale", action="store_true", help="use the true scale")
    sample.add_argument("--oracle-noise", dest="oracle_noise", action="store_true", help="use the recorded noises")
    return parser


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = vars(build_parser().parse_args(argv))
    setup_logging(args.get("verbose", False))
    command = args["command"]
    overrides = {k: v for k, v in args.items() if k not in CONTROL_ARGS}
    console = Console()
    try:
        cfg = load_run_config(command, args.get("config"), overrides)
        logger.debug(f"Resolved {command} config: {cfg.to_dict()}")
        return HANDLERS[command](cfg, console)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except PixdiffError as e:
        logger.error(str(e))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
