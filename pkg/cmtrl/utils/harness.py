import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import statsmodels.api as sm
from patsy import dmatrices

from cmtrl.resources.basics import (
    ALGORITHM_CONFIG_KEYS,
    ALGORITHMS,
    DEFAULT_BETA0,
    DEFAULT_C_ALPHA,
    DEFAULT_EPS0,
    DEFAULT_ETA0,
    DEFAULT_SEED,
    ERROR_FOOTER_KEY,
    EXIT_CONFIG_ERROR,
    EXIT_NUMERICAL_FAILURE,
    EXIT_OK,
    FLOAT_FORMAT,
    MODES,
    SEED_ENV_VAR,
)
from cmtrl.resources.mazes import (
    MAZE_DEMO_CONFIG,
    MAZE_DEMO_UNCONSTRAINED_PROBLEM,
    MAZE_ROLLOUT_STEPS,
    THREE_MAZES_GAMMA,
    THREE_MAZES_LOWER,
    THREE_MAZES_SPEC,
    THREE_MAZES_XI,
    TINY_CMDP_BIND_FRACTION,
    TINY_CMDP_GAMMA,
    TINY_CMDP_SHAPE,
)
from cmtrl.resources.resource_utils import (
    ConfigException,
    DataException,
    FEASIBILITY_TOL,
    MAX_ORACLE_POLICIES,
    MAX_ORACLE_TASKS,
    NumericalFailure,
)
from cmtrl.utils.consensus_net import WeightMatrix, graph_from_config
from cmtrl.utils.env_core import (
    MultiTaskProblem,
    bridge_policy,
    crossed_bridges,
    problem_from_json,
    random_problem,
)
from cmtrl.utils.exact_eval import (
    bind_lower_bound,
    greedy_rollout,
    task_values,
    tiny_cmdp_oracle,
    violation_of_values,
)
from cmtrl.utils.lfa import build_features, run_lfa
from cmtrl.utils.pdnac import run_pdnac
from cmtrl.utils.pdnpg import compute_b_lambda, run_pdnpg
from cmtrl.utils.trace import MetricsTrace, TraceWriter


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("harness_utils")
logger.setLevel(logging.INFO)


@dataclass(frozen=True)
class RunConfig:
    """
    Validated run configuration.

    `raw` holds the exact config bytes; its sha256 goes into the trace header.
    """

    algorithm: str
    problem: Dict
    graph: Dict
    K: Optional[int]
    alpha0: Optional[float] = None
    c_alpha: float = DEFAULT_C_ALPHA
    eta0: float = DEFAULT_ETA0
    mode: str = "decentral"
    eval_every: int = 1
    seed: int = DEFAULT_SEED
    progress: bool = False
    beta0: float = DEFAULT_BETA0
    eps0: float = DEFAULT_EPS0
    mu_lower: Optional[float] = None
    T: Optional[int] = None
    eps_max: float = 0.0
    delta: Optional[float] = None
    features: str = "identity"
    b_omega: Optional[float] = None
    raw: bytes = field(default=b"", repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


@dataclass
class RunResult:
    """Outcome of one run: the trace (None on failure), exit status, and error message."""

    trace: Optional[MetricsTrace]
    status: int
    message: str = ""


@dataclass
class SweepResult:
    """Per-run errors, median errors with consecutive ratios, and the log-log slope."""

    table: pd.DataFrame
    ratios: pd.DataFrame
    slope: float
    metric: str


def config_hash(raw: bytes) -> str:
    """Return the sha256 hex digest of the config bytes."""
    return hashlib.sha256(raw).hexdigest()


######################################################################
## Config ingestion
######################################################################
def _number(doc: Dict, key: str, default=None, kind=float, minimum=None, strict=False):
    if key not in doc or doc[key] is None:
        return default
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigException(f"/{key}", f"expected a number, got {value!r}")
    if kind is int and value != int(value):
        raise ConfigException(f"/{key}", f"expected an integer, got {value!r}")
    value = kind(value)
    if not math.isfinite(value):
        raise ConfigException(f"/{key}", "expected a finite number")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigException(
            f"/{key}", f"expected a value {'>' if strict else '>='} {minimum}, got {value}"
        )
    return value


def load_config(source: Union[str, bytes, Dict], algorithm: str) -> RunConfig:
    """
    Read and validate a run config.

    :param source: Path to a JSON file, raw JSON bytes, or an already-parsed dict.
    :param str algorithm: One of 'pdnpg', 'pdnac', 'lfa'.
    :return: RunConfig; raises ConfigException with a JSON pointer on any problem.
    """
    if algorithm not in ALGORITHMS:
        raise DataException(f"Unknown algorithm {algorithm}!")
    if isinstance(source, dict):
        raw = json.dumps(source, sort_keys=True).encode()
    elif isinstance(source, bytes):
        raw = source
    else:
        with open(source, "rb") as f:
            raw = f.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigException("", f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigException("", "expected a JSON object")

    unknown = sorted(set(doc) - ALGORITHM_CONFIG_KEYS[algorithm])
    if unknown:
        raise ConfigException(f"/{unknown[0]}", f"unknown key for {algorithm}")
    for key in ("problem", "graph"):
        if not isinstance(doc.get(key), dict):
            raise ConfigException(f"/{key}", "expected an object")

    mode = doc.get("mode", "decentral")
    if mode not in MODES:
        raise ConfigException("/mode", f"expected one of {MODES}")
    K = _number(doc, "K", kind=int, minimum=1)
    delta = _number(doc, "delta", minimum=0.0, strict=True)
    if K is None and (algorithm != "lfa" or delta is None):
        raise ConfigException("/K", "required")
    features = doc.get("features", "identity")
    if not isinstance(features, str):
        raise ConfigException("/features", "expected a string")
    progress = doc.get("progress", False)
    if not isinstance(progress, bool):
        raise ConfigException("/progress", "expected true or false")

    seed = _number(doc, "seed", DEFAULT_SEED, kind=int, minimum=0)
    if os.environ.get(SEED_ENV_VAR):
        try:
            seed = int(os.environ[SEED_ENV_VAR])
        except ValueError as e:
            raise ConfigException("/seed", f"{SEED_ENV_VAR} is not an integer") from e
        logger.info("Seed overridden by %s: %i", SEED_ENV_VAR, seed)

    return RunConfig(
        algorithm=algorithm,
        problem=doc["problem"],
        graph=doc["graph"],
        K=K,
        alpha0=_number(doc, "alpha0", minimum=0.0, strict=True),
        c_alpha=_number(doc, "c_alpha", DEFAULT_C_ALPHA, minimum=0.0, strict=True),
        eta0=_number(doc, "eta0", DEFAULT_ETA0, minimum=0.0, strict=True),
        mode=mode,
        eval_every=_number(doc, "eval_every", 1, kind=int, minimum=1),
        seed=seed,
        progress=progress,
        beta0=_number(doc, "beta0", DEFAULT_BETA0, minimum=0.0, strict=True),
        eps0=_number(doc, "eps0", DEFAULT_EPS0, minimum=0.0),
        mu_lower=_number(doc, "mu_lower", minimum=0.0, strict=True),
        T=_number(doc, "T", kind=int, minimum=1),
        eps_max=_number(doc, "eps_max", 0.0, minimum=0.0),
        delta=delta,
        features=features,
        b_omega=_number(doc, "b_omega", minimum=0.0, strict=True),
        raw=raw,
    )


def build_problem(cfg: Dict, seed: int = DEFAULT_SEED) -> MultiTaskProblem:
    """
    Build the problem named by a config `problem` entry.

    :param Dict cfg: `{"preset": "three_mazes", ...}`, `{"preset": "tiny_cmdp", "seed": s}`,
        `{"maze": {...}}` or `{"tabular": {...}}`.
    :param int seed: Run seed, used by `tiny_cmdp` when the entry has no seed of its own.
    :return: MultiTaskProblem.
    """
    preset = cfg.get("preset")
    try:
        if preset == "three_mazes":
            unknown = sorted(set(cfg) - {"preset", "lower", "upper", "gamma", "xi"})
            if unknown:
                raise ConfigException(f"/problem/{unknown[0]}", "unknown key")
            doc = dict(THREE_MAZES_SPEC)
            doc.update(
                {
                    "gamma": cfg.get("gamma", THREE_MAZES_GAMMA),
                    "xi": cfg.get("xi", THREE_MAZES_XI),
                    "lower": cfg.get("lower", THREE_MAZES_LOWER),
                    "upper": cfg.get("upper"),
                }
            )
            return problem_from_json(doc)
        if preset == "tiny_cmdp":
            unknown = sorted(set(cfg) - {"preset", "seed", "fraction"})
            if unknown:
                raise ConfigException(f"/problem/{unknown[0]}", "unknown key")
            problem = random_problem(
                gamma=TINY_CMDP_GAMMA, seed=int(cfg.get("seed", seed)), **TINY_CMDP_SHAPE
            )
            return bind_lower_bound(
                problem, 1, float(cfg.get("fraction", TINY_CMDP_BIND_FRACTION))
            )
        if preset is not None:
            raise ConfigException(
                "/problem/preset", "expected 'three_mazes' or 'tiny_cmdp'"
            )
        if set(cfg) == {"maze"}:
            return problem_from_json(cfg["maze"])
        if set(cfg) == {"tabular"}:
            return problem_from_json(cfg["tabular"])
    except ConfigException:
        raise
    except (DataException, KeyError, TypeError, ValueError) as e:
        raise ConfigException("/problem", str(e)) from e
    raise ConfigException("/problem", "expected 'preset', 'maze' or 'tabular'")


######################################################################
## Runs
######################################################################
def run_experiment(
    config: RunConfig, out_path: Optional[str] = None, progress: Optional[bool] = None
) -> RunResult:
    """
    Run one configured experiment, writing its trace incrementally when `out_path` is set.

    Config errors return status 2. Numerical failures and contract breaches raised mid-run
    return status 3. Any failure after the trace is opened leaves the partial trace on disk
    with an error footer.

    :param RunConfig config: Validated config.
    :param Optional[str] out_path: Trace CSV path.
    :param Optional[bool] progress: Progress bar override. Default uses the config.
    :return: RunResult.
    """
    progress = config.progress if progress is None else progress
    writer = None
    try:
        problem = build_problem(config.problem, config.seed)
        weights = graph_from_config(config.graph, problem.n_tasks)
        writer = TraceWriter(out_path) if out_path else None
        header = {"config_hash": config.config_hash, "seed": config.seed}
        common = dict(
            problem=problem,
            graph=weights,
            alpha0=config.alpha0,
            eta0=config.eta0,
            mode=config.mode,
            c_alpha=config.c_alpha,
            eval_every=config.eval_every,
            progress=progress,
            writer=writer,
            header=header,
        )
        if config.algorithm == "pdnpg":
            trace = run_pdnpg(K=config.K, **common)
        elif config.algorithm == "pdnac":
            trace = run_pdnac(
                K=config.K,
                beta0=config.beta0,
                eps0=config.eps0,
                mu_lower=config.mu_lower,
                seed=config.seed,
                **common,
            )
        else:
            features = build_features(
                config.features, problem.n_states, problem.n_actions, config.seed
            )
            trace = run_lfa(
                features=features,
                K=config.K,
                T=config.T,
                beta0=config.beta0,
                eps0=config.eps0,
                eps_max=config.eps_max,
                delta=config.delta,
                mu_lower=config.mu_lower,
                seed=config.seed,
                b_omega=config.b_omega,
                **common,
            )
    except ConfigException as e:
        logger.error("Config error %s", e)
        if writer is not None:
            writer.fail(str(e))
        return RunResult(trace=None, status=EXIT_CONFIG_ERROR, message=str(e))
    except DataException as e:
        if isinstance(e, NumericalFailure):
            logger.error("Numerical failure: %s", e)
        else:
            logger.error("Run aborted: %s", e)
        if writer is not None:
            writer.fail(str(e))
        return RunResult(trace=None, status=EXIT_NUMERICAL_FAILURE, message=str(e))
    except BaseException as e:
        if writer is not None:
            writer.fail(f"{type(e).__name__}: {e}")
        raise
    return RunResult(trace=trace, status=EXIT_OK)


def oracle_value(problem: MultiTaskProblem) -> Optional[float]:
    """
    Return the constrained optimal V_0 when an oracle exists, else None.

    Mazes use the best feasible deterministic bridge policy; tiny problems use the grid oracle.

    :param MultiTaskProblem problem: Problem.
    :return: Optimal average value or None.
    """
    if problem.maze is not None:
        best = None
        for bridge in range(1, len(problem.maze.bridges) + 1):
            try:
                values = task_values(problem, bridge_policy(problem, bridge))
            except DataException:
                continue
            if violation_of_values(values, problem.lower_bounds, problem.upper_bounds) > FEASIBILITY_TOL:
                continue
            if best is None or values.mean() > best:
                best = float(values.mean())
        return best
    if (
        problem.n_actions ** problem.n_states <= MAX_ORACLE_POLICIES
        and problem.n_tasks <= MAX_ORACLE_TASKS
    ):
        result = tiny_cmdp_oracle(problem)
        return result.value if result.feasible else None
    return None


def running_average_error(trace: MetricsTrace, v0_star: Optional[float]) -> float:
    """
    Return the worst agent's [average gap to v0_star]_+ + average violation over all recorded rows.

    Without an oracle value only the average violation is used.

    :param MetricsTrace trace: Trace of a run.
    :param Optional[float] v0_star: Constrained optimal V_0.
    :return: Error of the running-average iterate.
    """
    frame = trace.to_frame()
    worst = 0.0
    for _, rows in frame.groupby("agent"):
        error = rows["violation"].mean()
        if v0_star is not None:
            error += max(float((v0_star - rows["v0"]).mean()), 0.0)
        worst = max(worst, float(error))
    return worst


def _sweep_point(config: RunConfig) -> Dict:
    problem = build_problem(config.problem, config.seed)
    v0_star = oracle_value(problem)
    result = run_experiment(config)
    if result.trace is None:
        raise DataException(f"Sweep run K={config.K} failed: {result.message}")
    return {
        "K": config.K,
        "seed": config.seed,
        "oracle": np.nan if v0_star is None else v0_star,
        "error": running_average_error(result.trace, v0_star),
        "violation": running_average_error(result.trace, None),
    }


def rate_sweep(
    base_config: RunConfig,
    K_list: Sequence[int],
    seeds: Optional[Sequence[int]] = None,
    parallel: bool = False,
) -> SweepResult:
    """
    Run the same config at several K and estimate the convergence rate.

    For each K the median error over seeds is reported together with the ratio to the
    next K; the slope of log(error) ~ log(K) is fitted by OLS.

    :param RunConfig base_config: Config to sweep.
    :param Sequence[int] K_list: At least two iteration counts.
    :param Optional[Sequence[int]] seeds: Seeds. Default is the config seed.
    :param bool parallel: Run configs in a process pool.
    :return: SweepResult.
    """
    if len(set(K_list)) < 2:
        raise DataException("A rate sweep needs at least two distinct values of K!")
    seeds = [base_config.seed] if seeds is None else list(seeds)
    configs = [
        replace(base_config, K=int(K), seed=int(seed), progress=False)
        for K in sorted(set(K_list))
        for seed in seeds
    ]
    logger.info("Running %i sweep configurations...", len(configs))
    if parallel:
        with ProcessPoolExecutor() as executor:
            points = list(executor.map(_sweep_point, configs))
    else:
        points = [_sweep_point(c) for c in configs]

    table = pd.DataFrame(points)
    metric = "violation" if table["oracle"].isna().any() else "gap+violation"
    if metric == "violation":
        logger.warning("No oracle for at least one problem; reporting violation-only errors")
        table["error"] = table["violation"]

    medians = table.groupby("K", as_index=False)["error"].median()
    ratios = medians.rename(columns={"error": "median_error"})
    ratios["ratio_to_next"] = ratios["median_error"] / ratios["median_error"].shift(-1)

    fit = table[table["error"] > 0].assign(
        log_K=lambda df: np.log(df["K"]), log_error=lambda df: np.log(df["error"])
    )
    slope = float("nan")
    if fit["K"].nunique() >= 2:
        y, X = dmatrices("log_error ~ log_K", data=fit, return_type="dataframe")
        model = sm.OLS(y, X).fit()
        slope = float(model.params["log_K"])
        logger.info("log(error) ~ log(K) slope: %.4f", slope)
    else:
        logger.warning("Too few positive errors to fit a rate slope")
    return SweepResult(table=table, ratios=ratios, slope=slope, metric=metric)


######################################################################
## Scoring
######################################################################
DEFAULT_THRESHOLDS = {
    "max_final_violation": None,
    "min_final_v0": None,
    "dual_bounds": True,
    "consensus_envelope": True,
    "row_order": True,
    "complete": True,
}
"""
Acceptance predicates evaluated by `score_trace`; None disables a numeric predicate.
"""


def load_thresholds(path: str) -> Dict:
    """Read a thresholds JSON file, filling unspecified predicates with defaults."""
    with open(path) as f:
        doc = json.load(f)
    unknown = sorted(set(doc) - set(DEFAULT_THRESHOLDS))
    if unknown:
        raise ConfigException(f"/{unknown[0]}", "unknown threshold")
    return {**DEFAULT_THRESHOLDS, **doc}


def save_thresholds(thresholds: Dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(thresholds, f, indent=2, sort_keys=True)


def score_trace(
    trace: MetricsTrace,
    problem: Optional[MultiTaskProblem] = None,
    thresholds: Optional[Dict] = None,
) -> Dict:
    """
    Evaluate acceptance predicates against a trace.

    :param MetricsTrace trace: Trace to score.
    :param Optional[MultiTaskProblem] problem: Problem of the run; supplies B_lambda when given.
    :param Optional[Dict] thresholds: Predicate settings. Default is DEFAULT_THRESHOLDS.
    :return: JSON-ready verdict {"passed": bool, "predicates": [...]}.
    """
    thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    if not trace.rows:
        raise DataException("Cannot score an empty trace!")
    frame = trace.to_frame()
    final = trace.final_frame()
    predicates = []

    def _add(name: str, passed: bool, value, threshold) -> None:
        predicates.append(
            {"name": name, "passed": bool(passed), "value": value, "threshold": threshold}
        )

    if thresholds["complete"]:
        _add("complete", ERROR_FOOTER_KEY not in trace.header, trace.header.get(ERROR_FOOTER_KEY), None)
    if thresholds["row_order"]:
        keys = list(zip(frame["k"], frame["agent"]))
        _add("row_order", all(a < b for a, b in zip(keys, keys[1:])), None, None)
    if thresholds["max_final_violation"] is not None:
        worst = float(final["violation"].max())
        _add("max_final_violation", worst <= thresholds["max_final_violation"], worst, thresholds["max_final_violation"])
    if thresholds["min_final_v0"] is not None:
        lowest = float(final["v0"].min())
        _add("min_final_v0", lowest >= thresholds["min_final_v0"], lowest, thresholds["min_final_v0"])
    if thresholds["dual_bounds"]:
        if problem is not None:
            b_lambda = compute_b_lambda(problem)
        elif "b_lambda" in trace.header:
            b_lambda = float(trace.header["b_lambda"])
        else:
            raise DataException("Dual bound check needs the problem or a b_lambda header!")
        duals = frame[[c for c in frame.columns if c.startswith(("lambda_", "nu_"))]]
        _add(
            "dual_bounds",
            bool(((duals >= 0) & (duals <= b_lambda)).all().all()),
            float(duals.max().max()),
            b_lambda,
        )
    if thresholds["consensus_envelope"] and "consensus_bound" in trace.header:
        bound = float(trace.header["consensus_bound"])
        worst = float(frame["consensus_error"].max())
        _add("consensus_envelope", worst <= bound, worst, bound)

    verdict = {"passed": all(p["passed"] for p in predicates), "predicates": predicates}
    for p in predicates:
        if not p["passed"]:
            logger.warning("Predicate %s failed (value %s, threshold %s)", p["name"], p["value"], p["threshold"])
    return verdict


######################################################################
## Maze demonstration
######################################################################
def maze_bridges(problem: MultiTaskProblem, policies: np.ndarray) -> List[List[int]]:
    """Return, per agent, the bridges crossed by the greedy rollout of its policy."""
    bridges = []
    for j in range(problem.n_tasks):
        policy = policies[min(j, policies.shape[0] - 1)]
        rollout = greedy_rollout(problem, policy, MAZE_ROLLOUT_STEPS)
        bridges.append(crossed_bridges(problem.maze, rollout.path))
    return bridges


def maze_demo(
    K: Optional[int] = None,
    out_dir: Optional[str] = None,
    progress: bool = False,
    mode: Optional[str] = None,
) -> Dict:
    """
    Run the three-maze demonstration with and without the lower bounds.

    Reports each agent's greedy bridges and final values, and scores the unconstrained
    run's final policies against the constrained bounds after the fact.

    :param Optional[int] K: Iterations. Default is the demo config's K.
    :param Optional[str] out_dir: Directory for the two traces and `maze_demo.json`.
    :param bool progress: Show progress bars.
    :param Optional[str] mode: Override of the demo mode.
    :return: Summary dict.
    """
    base = dict(MAZE_DEMO_CONFIG)
    if K is not None:
        base["K"] = K
    if mode is not None:
        base["mode"] = mode
    runs = {
        "constrained": base,
        "unconstrained": {**base, "problem": MAZE_DEMO_UNCONSTRAINED_PROBLEM},
    }
    constrained_problem = build_problem(MAZE_DEMO_CONFIG["problem"])
    summary = {"K": base["K"], "lower": THREE_MAZES_LOWER}
    for name, doc in runs.items():
        config = load_config(doc, "pdnpg")
        out_path = os.path.join(out_dir, f"maze_{name}.csv") if out_dir else None
        result = run_experiment(config, out_path, progress)
        if result.trace is None:
            raise NumericalFailure(f"Maze demo run {name} failed: {result.message}")
        problem = build_problem(config.problem)
        final_values = np.array(
            [
                task_values(problem, p)
                for p in result.trace.final_policies
            ]
        )
        summary[name] = {
            "bridges": maze_bridges(problem, result.trace.final_policies),
            "final_v0": [float(v.mean()) for v in final_values],
            "final_violation": [
                violation_of_values(
                    v,
                    constrained_problem.lower_bounds,
                    constrained_problem.upper_bounds,
                )
                for v in final_values
            ],
        }
        logger.info("Maze demo %s: bridges %s", name, summary[name]["bridges"])
    summary["oracle_v0"] = oracle_value(constrained_problem)
    if out_dir:
        with open(os.path.join(out_dir, "maze_demo.json"), "w") as f:
            json.dump(summary, f, indent=2)
    return summary


def spectrum(graph_cfg: Dict) -> WeightMatrix:
    """Return the consensus weights of a graph config entry."""
    return graph_from_config(graph_cfg)


def write_frame(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
