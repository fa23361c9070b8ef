import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np
from scipy.special import softmax
from tqdm import tqdm

from cmtrl.resources.resource_utils import DataException
from cmtrl.utils.consensus_net import (
    CommGraph,
    WeightMatrix,
    as_weight_matrix,
    consensus_error,
    consensus_step,
)
from cmtrl.utils.env_core import MultiTaskProblem
from cmtrl.utils.exact_eval import evaluate_all_tasks, violation_of_values
from cmtrl.utils.trace import MetricsTrace, TraceWriter


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("pdnpg_utils")
logger.setLevel(logging.INFO)


@dataclass(frozen=True, eq=False)
class DualState:
    """
    Per-agent dual pairs (lambda_i, nu_i) for the lower and upper bound of task i.

    Both live in [0, B_lambda]; duals of infinite bounds stay at 0.
    """

    lam: np.ndarray
    nu: np.ndarray
    b_lambda: float

    @classmethod
    def zeros(cls, n_tasks: int, b_lambda: float) -> "DualState":
        return cls(lam=np.zeros(n_tasks), nu=np.zeros(n_tasks), b_lambda=b_lambda)

    @property
    def actor_weights(self) -> np.ndarray:
        """Return 1/N + lambda_i - nu_i for every agent."""
        return 1.0 / self.lam.shape[0] + self.lam - self.nu


def compute_b_lambda(problem: MultiTaskProblem) -> float:
    """Return the dual bound B_lambda = R_max / (xi (1 - gamma))."""
    return problem.r_max / (problem.slater_margin * (1.0 - problem.gamma))


def softmax_policy(theta: np.ndarray) -> np.ndarray:
    """
    Return the softmax PolicyTable of an |S| x |A| logit table.

    scipy's softmax subtracts the per-state maximum before exponentiating.

    :param np.ndarray theta: Logits theta(s, a).
    :return: PolicyTable.
    """
    if not np.all(np.isfinite(theta)):
        raise DataException("Policy parameters contain NaN or infinite entries!")
    return softmax(theta, axis=-1)


def dual_step(
    dual: DualState,
    values: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    eta: float,
) -> DualState:
    """
    Take one projected dual step for every agent.

    lambda' = clamp(lambda - eta (V - l), 0, B) and nu' = clamp(nu + eta (V - u), 0, B);
    duals of infinite bounds are pinned to 0.

    :param DualState dual: Current duals.
    :param np.ndarray values: Agent i's estimate of V_i(rho), one entry per agent.
    :param np.ndarray lower: Lower bounds.
    :param np.ndarray upper: Upper bounds.
    :param float eta: Dual step size (> 0).
    :return: New DualState.
    """
    if eta <= 0:
        raise DataException(f"Dual step size must be positive, got {eta}!")
    if np.any(dual.lam < 0) or np.any(dual.nu < 0):
        raise DataException("Dual variables must be nonnegative!")
    values = np.asarray(values, dtype=float)
    finite_lower = np.isfinite(lower)
    finite_upper = np.isfinite(upper)
    lam = np.where(
        finite_lower,
        np.clip(dual.lam - eta * (values - np.where(finite_lower, lower, 0.0)), 0.0, dual.b_lambda),
        0.0,
    )
    nu = np.where(
        finite_upper,
        np.clip(dual.nu + eta * (values - np.where(finite_upper, upper, 0.0)), 0.0, dual.b_lambda),
        0.0,
    )
    return DualState(lam=lam, nu=nu, b_lambda=dual.b_lambda)


def _per_agent(scale: np.ndarray, tables: np.ndarray) -> np.ndarray:
    return scale.reshape((-1,) + (1,) * (tables.ndim - 1))


def npg_actor_step(
    thetas: np.ndarray,
    weights: Union[WeightMatrix, np.ndarray],
    q_tables: np.ndarray,
    dual: DualState,
    alpha: float,
) -> np.ndarray:
    """
    Decentralized NPG step: theta_i' = sum_j W_ij theta_j + alpha (1/N + lambda_i - nu_i) Q_i.

    :param np.ndarray thetas: N x |S| x |A| agent parameters.
    :param weights: Consensus weights.
    :param np.ndarray q_tables: N x |S| x |A| Q tables, agent i's for its own task.
    :param DualState dual: Current duals.
    :param float alpha: Actor step size.
    :return: New N x |S| x |A| parameters.
    """
    n_agents = thetas.shape[0]
    if q_tables.shape != thetas.shape or dual.lam.shape[0] != n_agents:
        raise DataException(
            f"Actor step got parameters {thetas.shape}, Q tables {q_tables.shape} and {dual.lam.shape[0]} duals!"
        )
    mixed = consensus_step(thetas.reshape(n_agents, -1), weights).reshape(thetas.shape)
    return mixed + alpha * (_per_agent(dual.actor_weights, q_tables) * q_tables)


def central_actor_step(
    theta: np.ndarray, q_tables: np.ndarray, dual: DualState, alpha: float
) -> np.ndarray:
    """
    Single-server NPG step: theta' = theta + alpha sum_j (1/N + lambda_j - nu_j) Q_j.

    :param np.ndarray theta: |S| x |A| shared parameters.
    :param np.ndarray q_tables: N x |S| x |A| per-task Q tables under the shared policy.
    :param DualState dual: Current duals.
    :param float alpha: Actor step size.
    :return: New |S| x |A| parameters.
    """
    return theta + alpha * (_per_agent(dual.actor_weights, q_tables) * q_tables).sum(axis=0)


def default_alpha0(sigma2: float, n_agents: int, c: float = 1.0) -> float:
    """Return alpha0 = c sqrt(1 - sigma2) / N^(1/4)."""
    return c * math.sqrt(1.0 - sigma2) / n_agents ** 0.25


def consensus_error_bound(
    problem: MultiTaskProblem,
    n_agents: int,
    alpha: float,
    sigma2: float,
    critic_bound: float,
) -> float:
    """
    Return the envelope (B_lambda + 1/N) sqrt(N |S||A|) B alpha / ((1 - gamma)(1 - sigma2)).

    :param MultiTaskProblem problem: Problem.
    :param int n_agents: Number of agents N.
    :param float alpha: Actor step size.
    :param float sigma2: Second singular value of W.
    :param float critic_bound: B; R_max for exact Q, R_max / (1 - gamma) + 1 for a tabular critic.
    :return: Bound on max_i ||theta_bar - theta_i||.
    """
    return (
        (compute_b_lambda(problem) + 1.0 / n_agents)
        * math.sqrt(n_agents * problem.n_states * problem.n_actions)
        * critic_bound
        * alpha
        / ((1.0 - problem.gamma) * (1.0 - sigma2))
    )


def check_consensus_bound(trace: MetricsTrace, error: float, bound: float, k: int) -> None:
    """Count and log a breach of the consensus envelope."""
    if error > bound:
        trace.summary["consensus_bound_violations"] = (
            trace.summary.get("consensus_bound_violations", 0) + 1
        )
        logger.warning(
            "Consensus error %.6e exceeds its bound %.6e at iteration %i", error, bound, k
        )


def run_pdnpg(
    problem: MultiTaskProblem,
    graph: Union[CommGraph, WeightMatrix],
    K: int,
    alpha0: Optional[float] = None,
    eta0: float = 1.0,
    mode: str = "decentral",
    c_alpha: float = 1.0,
    eval_every: int = 1,
    progress: bool = False,
    writer: Optional[TraceWriter] = None,
    header: Optional[Dict] = None,
) -> MetricsTrace:
    """
    Run exact-gradient multi-task primal-dual NPG for K iterations.

    Each iteration evaluates every agent's policy exactly, steps the actors with the
    current duals, then steps the duals with the exact values. `mode="central"` keeps a
    single server policy updated with the sum of all task directions; `mode="decentral"`
    keeps one policy per agent mixed through W. Step sizes are alpha = alpha0 / sqrt(K)
    and eta = eta0 / sqrt(K). Rows are recorded every `eval_every` iterations and for
    the final iterate k = K.

    :param MultiTaskProblem problem: Problem with one task per agent.
    :param graph: Communication graph (lazy Metropolis weights) or explicit weights.
    :param int K: Number of iterations.
    :param Optional[float] alpha0: Actor constant. Default is c_alpha sqrt(1 - sigma2) / N^(1/4).
    :param float eta0: Dual constant.
    :param str mode: 'central' or 'decentral'.
    :param float c_alpha: Constant c of the default alpha0.
    :param int eval_every: Recording stride.
    :param bool progress: Show a progress bar.
    :param Optional[TraceWriter] writer: Incremental CSV sink.
    :param Optional[Dict] header: Extra header entries (e.g. config hash and seed).
    :return: MetricsTrace with final policies and parameters attached.
    """
    if K < 1 or eval_every < 1:
        raise DataException(f"K and eval_every must be at least 1; got K={K}, eval_every={eval_every}!")
    if mode not in ("central", "decentral"):
        raise DataException(f"Unknown mode {mode}!")
    weights = as_weight_matrix(graph)
    n = problem.n_tasks
    if weights.n_agents != n:
        raise DataException(
            f"Weight matrix has {weights.n_agents} agents but the problem has {n} tasks!"
        )
    sigma2 = 0.0 if mode == "central" else weights.sigma2
    if alpha0 is None:
        alpha0 = default_alpha0(sigma2, n, c_alpha)
    alpha = alpha0 / math.sqrt(K)
    eta = eta0 / math.sqrt(K)
    b_lambda = compute_b_lambda(problem)
    bound = consensus_error_bound(problem, n, alpha, sigma2, problem.r_max)

    trace = MetricsTrace(
        n_tasks=n,
        header={
            **(header or {}),
            "algorithm": "pdnpg",
            "mode": mode,
            "b_lambda": b_lambda,
            "sigma2": sigma2,
            "r_max": problem.r_max,
            "alpha": alpha,
            "eta": eta,
            "consensus_bound": bound,
        },
        writer=writer,
    ).start()
    trace.summary["consensus_bound_violations"] = 0
    logger.info(
        "Running PDNPG (%s) for %i iterations with alpha=%.3e, eta=%.3e, B_lambda=%.3e",
        mode,
        K,
        alpha,
        eta,
        b_lambda,
    )

    n_params = 1 if mode == "central" else n
    thetas = np.zeros((n_params, problem.n_states, problem.n_actions))
    dual = DualState.zeros(n, b_lambda)

    for k in tqdm(range(K + 1), unit="iteration", disable=not progress):
        policies = softmax_policy(thetas)
        bundles = [evaluate_all_tasks(problem, p) for p in policies]
        values = np.array([[b.V_rho for b in agent] for agent in bundles])

        if k % eval_every == 0 or k == K:
            error = 0.0 if mode == "central" else consensus_error(thetas)
            check_consensus_bound(trace, error, bound, k)
            for j in range(n):
                row_values = values[0 if mode == "central" else j]
                trace.add_row(
                    k,
                    j,
                    row_values,
                    violation_of_values(
                        row_values, problem.lower_bounds, problem.upper_bounds
                    ),
                    error,
                    float("nan"),
                    dual.lam,
                    dual.nu,
                )
        if k == K:
            break

        if mode == "central":
            q_tables = np.array([bundles[0][i].Q for i in range(n)])
            thetas = central_actor_step(thetas[0], q_tables, dual, alpha)[None]
            own_values = values[0]
        else:
            q_tables = np.array([bundles[i][i].Q for i in range(n)])
            thetas = npg_actor_step(thetas, weights, q_tables, dual, alpha)
            own_values = np.diag(values)
        dual = dual_step(dual, own_values, problem.lower_bounds, problem.upper_bounds, eta)

    trace.final_params = thetas
    trace.final_policies = softmax_policy(thetas)
    trace.summary["iterations"] = K
    trace.close()
    logger.info(
        "PDNPG finished; consensus bound breaches: %i",
        trace.summary["consensus_bound_violations"],
    )
    return trace
