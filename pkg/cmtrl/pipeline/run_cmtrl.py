import argparse
import json
import logging
import sys

import numpy as np

from cmtrl.resources.basics import (
    ALGORITHMS,
    EXIT_CONFIG_ERROR,
    EXIT_NUMERICAL_FAILURE,
    EXIT_OK,
    EXIT_SCORE_FAILURE,
)
from cmtrl.resources.resource_utils import (
    ConfigException,
    DataException,
    NumericalFailure,
)
from cmtrl.utils.consensus_net import weight_matrix_to_csv
from cmtrl.utils.harness import (
    DEFAULT_THRESHOLDS,
    build_problem,
    load_config,
    load_thresholds,
    maze_demo,
    rate_sweep,
    run_experiment,
    score_trace,
    spectrum,
    write_frame,
)
from cmtrl.utils.lfa import build_features, measure_eps_max
from cmtrl.utils.trace import read_trace


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("run_cmtrl")
logger.setLevel(logging.INFO)


def _read_json(source: str):
    """Parse a JSON string, or the contents of the file it names."""
    text = source
    if not source.lstrip().startswith(("{", "[")):
        with open(source) as f:
            text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigException("", f"invalid JSON: {e}") from e


def main(args) -> int:
    """Run one `cmtrl` command and return its exit status."""
    try:
        if args.command in ALGORITHMS:
            config = load_config(args.config, args.command)
            logger.info("Running %s with config hash %s...", args.command, config.config_hash)
            result = run_experiment(
                config, args.out, progress=True if args.progress else None
            )
            if result.status == EXIT_OK:
                logger.info("Run summary: %s", result.trace.summary)
            return result.status

        if args.command == "maze-demo":
            summary = maze_demo(
                K=args.K, out_dir=args.out_dir, progress=args.progress, mode=args.mode
            )
            print(json.dumps(summary, indent=2))
            return EXIT_OK

        if args.command == "sweep":
            config = load_config(args.config, args.algorithm)
            result = rate_sweep(config, args.K, args.seeds, parallel=args.parallel)
            logger.info("Median errors (%s):\n%s", result.metric, result.ratios)
            logger.info("Fitted log-log slope: %.4f", result.slope)
            if args.out:
                write_frame(result.table, args.out)
            print(result.ratios.to_string(index=False))
            return EXIT_OK

        if args.command == "score":
            trace = read_trace(args.trace)
            problem = None
            if args.config:
                config = load_config(args.config, trace.header.get("algorithm", "pdnpg"))
                problem = build_problem(config.problem, config.seed)
            thresholds = (
                load_thresholds(args.thresholds) if args.thresholds else dict(DEFAULT_THRESHOLDS)
            )
            verdict = score_trace(trace, problem, thresholds)
            text = json.dumps(verdict, indent=2)
            if args.out:
                with open(args.out, "w") as f:
                    f.write(text)
            print(text)
            return EXIT_OK if verdict["passed"] else EXIT_SCORE_FAILURE

        if args.command == "spectrum":
            weights = spectrum(_read_json(args.graph))
            with np.printoptions(precision=6, suppress=True):
                print(weights.W)
            print(f"sigma2 = {weights.sigma2:.12g}")
            if args.out:
                weight_matrix_to_csv(weights, args.out)
            return EXIT_OK

        if args.command == "measure-epsmax":
            config = load_config(args.config, "lfa")
            problem = build_problem(config.problem, config.seed)
            features = build_features(
                config.features, problem.n_states, problem.n_actions, config.seed
            )
            eps_max = measure_eps_max(
                problem, features, n_policies=args.n_policies, eps=args.eps, seed=config.seed
            )
            print(json.dumps({"features": features.name, "eps_max": eps_max}))
            return EXIT_OK

        raise DataException(f"Unknown command {args.command}!")

    except ConfigException as e:
        logger.error("Config error %s", e)
        return EXIT_CONFIG_ERROR
    except NumericalFailure as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL_FAILURE
    except (DataException, OSError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG_ERROR


def get_parser() -> argparse.ArgumentParser:
    """Build the `cmtrl` argument parser."""
    parser = argparse.ArgumentParser(
        "cmtrl",
        description="This script runs constrained multi-task primal-dual policy optimization.",
    )
    parser.add_argument(
        "--progress", help="Show progress bars.", action="store_true"
    )

    # Create subparsers for each step
    # Need to specify `dest` to be able to check which subparser is being invoked
    # `dest`: https://docs.python.org/3/library/argparse.html#dest
    subparsers = parser.add_subparsers(title="command", dest="command", required=True)

    for algorithm, help_text in (
        ("pdnpg", "Run exact-gradient primal-dual natural policy gradient."),
        ("pdnac", "Run sample-based primal-dual natural actor-critic with tabular critics."),
        ("lfa", "Run primal-dual natural actor-critic with linear critics."),
    ):
        run = subparsers.add_parser(algorithm, help=help_text)
        run.add_argument("--config", help="Path to the run config JSON.", required=True)
        run.add_argument("--out", help="Path of the trace CSV to write.")

    demo = subparsers.add_parser(
        "maze-demo",
        help="""
        Run the three-maze GridWorld with and without the lower bounds and report
        which bridge each agent's greedy policy crosses.
        """,
    )
    demo.add_argument("--K", help="Number of iterations.", type=int)
    demo.add_argument("--mode", help="'central' or 'decentral'.", choices=["central", "decentral"])
    demo.add_argument("--out-dir", help="Directory for traces and the summary JSON.")

    sweep = subparsers.add_parser(
        "sweep", help="Run one config at several K and fit the convergence rate."
    )
    sweep.add_argument("--config", help="Path to the base run config JSON.", required=True)
    sweep.add_argument("--algorithm", help="Algorithm to sweep.", choices=ALGORITHMS, default="pdnpg")
    sweep.add_argument("--K", help="Iteration counts.", type=int, nargs="+", required=True)
    sweep.add_argument("--seeds", help="Seeds.", type=int, nargs="+")
    sweep.add_argument("--parallel", help="Run sweep points in a process pool.", action="store_true")
    sweep.add_argument("--out", help="Path of the per-run error CSV to write.")

    score = subparsers.add_parser(
        "score", help="Evaluate acceptance predicates on a trace."
    )
    score.add_argument("--trace", help="Trace CSV to score.", required=True)
    score.add_argument("--thresholds", help="Thresholds JSON.")
    score.add_argument(
        "--config",
        help="Run config JSON; when given the dual bound is recomputed from the problem.",
    )
    score.add_argument("--out", help="Path of the verdict JSON to write.")

    spec = subparsers.add_parser(
        "spectrum", help="Print the consensus weights of a graph and their second singular value."
    )
    spec.add_argument(
        "--graph",
        help="""
        Graph config as a JSON string or a path to a JSON file.

        Example format:
        '{"preset": "ring", "n": 5}'
        """,
        required=True,
    )
    spec.add_argument("--out", help="Path of the weight matrix CSV to write.")

    epsmax = subparsers.add_parser(
        "measure-epsmax",
        help="Estimate the worst linear critic approximation error over random policies.",
    )
    epsmax.add_argument("--config", help="Path to an lfa run config JSON.", required=True)
    epsmax.add_argument("--n-policies", help="Number of random policies.", type=int, default=100)
    epsmax.add_argument(
        "--eps", help="Uniform mixing applied to each random policy.", type=float, default=0.1
    )
    return parser


if __name__ == "__main__":
    sys.exit(main(get_parser().parse_args()))
