import argparse
import logging
import sys
from typing import List, Optional

from benchmark import ExperimentConfig, run_eval, run_ga_solve, run_synth_bench, run_train
from config import Config
from exceptions import GraphMatchingError
from matching.graduated_assignment import GraduatedAssignmentConfig

# Configure logging
logging.basicConfig(level=Config.LOG_LEVEL,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graph-consensus",
        description="Two-stage neural graph matching with neighborhood-consensus refinement",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    bench = commands.add_parser("synth-bench", help="run the synthetic structural-noise sweep")
    bench.add_argument("--config", required=True, help="experiment config (JSON)")
    bench.add_argument("--workers", type=int, default=Config.DEFAULT_WORKERS, help="parallel sweep points")
    bench.add_argument("--out", default=None, help="output directory")

    train = commands.add_parser("train", help="train a model and save a checkpoint")
    train.add_argument("--config", required=True, help="experiment config (JSON)")
    train.add_argument("--out", default=None, help="output directory")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint on the configured test set")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    evaluate.add_argument("--config", required=True, help="experiment config (JSON)")
    evaluate.add_argument("--num-iters", type=int, default=None, help="override the number of refinement iterations")
    evaluate.add_argument("--out", default=None, help="output directory (default: next to the checkpoint)")

    solve = commands.add_parser("ga-solve", help="solve a stored pair by graduated assignment")
    solve.add_argument("--pair", required=True, help="graph pair (JSON)")
    solve.add_argument("--out", default=None, help="output directory")
    solve.add_argument("--initial-scale", type=float, default=Config.GA_INITIAL_SCALE)
    solve.add_argument("--scale-growth", type=float, default=Config.GA_SCALE_GROWTH)
    solve.add_argument("--iterations", type=int, default=Config.GA_ITERATIONS)
    solve.add_argument("--restarts", type=int, default=0, help="extra randomly initialised runs")
    solve.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth-bench":
            return run_synth_bench(ExperimentConfig.load(args.config), args.workers, args.out)
        if args.command == "train":
            run_train(ExperimentConfig.load(args.config), args.out)
        elif args.command == "eval":
            run_eval(ExperimentConfig.load(args.config), args.checkpoint, args.out, args.num_iters)
        elif args.command == "ga-solve":
            ga_config = GraduatedAssignmentConfig(
                initial_scale=args.initial_scale,
                scale_growth=args.scale_growth,
                iterations=args.iterations,
                num_restarts=args.restarts,
                seed=args.seed,
            )
            ga_config.validate()
            run_ga_solve(args.pair, ga_config, args.out)
        return 0
    except GraphMatchingError as e:
        logger.error(f"{args.command} failed: {str(e)}", exc_info=True)
        return 1
    except ValueError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
