import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import lu_factor, lu_solve

from cmtrl.resources.basics import FLOAT_FORMAT
from cmtrl.resources.resource_utils import (
    ADVANTAGE_TOL,
    BELLMAN_RESIDUAL_TOL,
    DataException,
    FEASIBILITY_TOL,
    MAX_ORACLE_POLICIES,
    MAX_ORACLE_TASKS,
    NumericalFailure,
    ORACLE_COARSE_STEPS,
    ORACLE_FINE_STEPS,
    PROB_TOL,
)
from cmtrl.utils.env_core import MultiTaskProblem, with_bounds


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("exact_eval_utils")
logger.setLevel(logging.INFO)


@dataclass(frozen=True, eq=False)
class ValueBundle:
    """Exact V, Q, advantage, and initial-distribution value of one task under one policy."""

    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    V_rho: float


@dataclass(frozen=True, eq=False)
class RolloutResult:
    """State path of a greedy rollout and how it ended."""

    path: List[int]
    reached_goal: bool
    cycle: bool


@dataclass(frozen=True, eq=False)
class OracleResult:
    """
    Approximate constrained optimum of a tiny CMDP.

    `resolution_error` bounds the objective lost to the mixing-weight grid on the
    incumbent pair of deterministic policies.
    """

    value: float
    policy: Optional[np.ndarray]
    feasible: bool
    resolution_error: float


def check_policy(policy: np.ndarray, n_states: int, n_actions: int) -> None:
    """
    Raise if `policy` is not a valid |S| x |A| PolicyTable.

    :param np.ndarray policy: Candidate policy table.
    :param int n_states: Expected number of rows.
    :param int n_actions: Expected number of columns.
    :return: None.
    """
    if policy.shape != (n_states, n_actions):
        raise DataException(
            f"Policy has shape {policy.shape}, expected ({n_states}, {n_actions})!"
        )
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > PROB_TOL):
        raise DataException("Policy rows must be nonnegative and sum to 1!")


def deterministic_policy(actions: Sequence[int], n_actions: int) -> np.ndarray:
    """Return the PolicyTable that plays `actions[s]` at every state s."""
    policy = np.zeros((len(actions), n_actions))
    policy[np.arange(len(actions)), np.asarray(actions)] = 1.0
    return policy


def random_policy(
    n_states: int, n_actions: int, rng: np.random.Generator, eps: float = 0.0
) -> np.ndarray:
    """
    Draw a PolicyTable with Dirichlet(1) rows, optionally mixed with the uniform policy.

    :param int n_states: Number of states.
    :param int n_actions: Number of actions.
    :param np.random.Generator rng: Generator to draw from.
    :param float eps: Weight of the uniform policy in the mixture. Default is 0.
    :return: PolicyTable.
    """
    policy = rng.dirichlet(np.ones(n_actions), size=n_states)
    return eps / n_actions + (1.0 - eps) * policy


def induced_chain(transition: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """Return the state transition matrix P^pi(s'|s) = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("sa,sat->st", policy, transition)


def evaluate_all_tasks(problem: MultiTaskProblem, policy: np.ndarray) -> List[ValueBundle]:
    """
    Exactly evaluate every task under one policy with a single LU factorization.

    :param MultiTaskProblem problem: Problem to evaluate.
    :param np.ndarray policy: PolicyTable.
    :return: One ValueBundle per task.
    """
    check_policy(policy, problem.n_states, problem.n_actions)
    P_pi = induced_chain(problem.transition, policy)
    system = np.eye(problem.n_states) - problem.gamma * P_pi
    r_pi = np.einsum("nsa,sa->sn", problem.rewards, policy)
    V = lu_solve(lu_factor(system), r_pi)

    residual = np.max(np.abs(system @ V - r_pi)) if V.size else 0.0
    if residual > BELLMAN_RESIDUAL_TOL * max(1.0, problem.r_max):
        raise NumericalFailure(
            f"Policy evaluation residual {residual:.3e} exceeds tolerance!"
        )

    bundles = []
    for i in range(problem.n_tasks):
        Q = problem.rewards[i] + problem.gamma * problem.transition @ V[:, i]
        bundles.append(
            ValueBundle(
                V=V[:, i],
                Q=Q,
                A=Q - V[:, i][:, None],
                V_rho=float(problem.rho @ V[:, i]),
            )
        )
    return bundles


def policy_evaluation(
    problem: MultiTaskProblem, task_index: int, policy: np.ndarray
) -> ValueBundle:
    """
    Exactly evaluate one task by solving (I - gamma P^pi)V = r^pi.

    :param MultiTaskProblem problem: Problem to evaluate.
    :param int task_index: Task to evaluate.
    :param np.ndarray policy: PolicyTable.
    :return: ValueBundle of the task.
    """
    if not 0 <= task_index < problem.n_tasks:
        raise DataException(f"Task {task_index} does not exist!")
    bundle = evaluate_all_tasks(problem, policy)[task_index]
    mean_adv = np.abs(np.sum(policy * bundle.A, axis=1)).max()
    if mean_adv > ADVANTAGE_TOL * max(1.0, problem.r_max / (1.0 - problem.gamma)):
        raise NumericalFailure(f"Advantage is not zero-mean ({mean_adv:.3e})!")
    return bundle


def task_values(problem: MultiTaskProblem, policy: np.ndarray) -> np.ndarray:
    """Return the vector of V_i^pi(rho) over tasks."""
    return np.array([b.V_rho for b in evaluate_all_tasks(problem, policy)])


def average_value(problem: MultiTaskProblem, policy: np.ndarray) -> float:
    """Return V_0^pi(rho), the mean over tasks of V_i^pi(rho)."""
    return float(np.mean(task_values(problem, policy)))


def violation_of_values(
    values: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> float:
    """Return sum_i [l_i - V_i]_+ + [V_i - u_i]_+ for a vector of task values."""
    below = np.where(np.isfinite(lower), np.maximum(lower - values, 0.0), 0.0)
    above = np.where(np.isfinite(upper), np.maximum(values - upper, 0.0), 0.0)
    return float(np.sum(below) + np.sum(above))


def constraint_violation(problem: MultiTaskProblem, policy: np.ndarray) -> float:
    """Return the total constraint violation of a policy."""
    return violation_of_values(
        task_values(problem, policy), problem.lower_bounds, problem.upper_bounds
    )


def lagrangian_value(
    problem: MultiTaskProblem,
    policy: np.ndarray,
    lam: np.ndarray,
    nu: np.ndarray,
) -> float:
    """
    Return V_0 + sum_i lambda_i (V_i - l_i) - nu_i (V_i - u_i).

    Tasks with an infinite bound contribute nothing for that bound.

    :param MultiTaskProblem problem: Problem.
    :param np.ndarray policy: PolicyTable.
    :param np.ndarray lam: Lower-bound duals, one per task.
    :param np.ndarray nu: Upper-bound duals, one per task.
    :return: Lagrangian value.
    """
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(lam < 0) or np.any(nu < 0):
        raise DataException("Dual variables must be nonnegative!")
    values = task_values(problem, policy)
    lower_term = np.where(
        np.isfinite(problem.lower_bounds), lam * (values - problem.lower_bounds), 0.0
    )
    upper_term = np.where(
        np.isfinite(problem.upper_bounds), nu * (values - problem.upper_bounds), 0.0
    )
    return float(np.mean(values) + np.sum(lower_term) - np.sum(upper_term))


def discounted_visitation(problem: MultiTaskProblem, policy: np.ndarray) -> np.ndarray:
    """
    Return the normalized discounted state visitation d_rho^pi.

    Solves (I - gamma (P^pi)^T) d = (1 - gamma) rho.

    :param MultiTaskProblem problem: Problem.
    :param np.ndarray policy: PolicyTable.
    :return: Distribution over states.
    """
    P_pi = induced_chain(problem.transition, policy)
    system = np.eye(problem.n_states) - problem.gamma * P_pi.T
    return np.linalg.solve(system, (1.0 - problem.gamma) * problem.rho)


def greedy_rollout(
    problem: MultiTaskProblem, policy: np.ndarray, max_steps: int
) -> RolloutResult:
    """
    Follow argmax_a pi(a|s) from the most likely initial state on deterministic dynamics.

    Ties are broken by lowest action index (and lowest state index for the start).
    The rollout stops at the maze goal, when a state repeats (cycle), or after `max_steps`.

    :param MultiTaskProblem problem: Problem with deterministic transitions.
    :param np.ndarray policy: PolicyTable.
    :param int max_steps: Maximum number of moves.
    :return: RolloutResult.
    """
    check_policy(policy, problem.n_states, problem.n_actions)
    goal = None
    if problem.maze is not None:
        goal = problem.maze.state_index()[problem.maze.goal]

    state = int(np.argmax(problem.rho))
    path = [state]
    seen = {state}
    for _ in range(max_steps):
        if state == goal:
            return RolloutResult(path=path, reached_goal=True, cycle=False)
        action = int(np.argmax(policy[state]))
        row = problem.transition[state, action]
        nxt = int(np.argmax(row))
        if abs(row[nxt] - 1.0) > PROB_TOL:
            raise DataException(
                f"Greedy rollouts need deterministic dynamics; row (s={state}, a={action}) is stochastic!"
            )
        path.append(nxt)
        if nxt in seen and nxt != goal:
            return RolloutResult(path=path, reached_goal=False, cycle=True)
        seen.add(nxt)
        state = nxt
    return RolloutResult(path=path, reached_goal=state == goal, cycle=False)


def monte_carlo_value(
    problem: MultiTaskProblem,
    task_index: int,
    policy: np.ndarray,
    n_episodes: int,
    seed: int,
    horizon: Optional[int] = None,
) -> Tuple[float, float]:
    """
    Estimate V_i^pi(rho) from truncated simulated episodes.

    :param MultiTaskProblem problem: Problem.
    :param int task_index: Task to estimate.
    :param np.ndarray policy: PolicyTable.
    :param int n_episodes: Number of independent episodes.
    :param int seed: Seed of the generator.
    :param Optional[int] horizon: Truncation length. Default is ceil(log(1e-4) / log(gamma)).
    :return: (mean discounted return, standard error).
    """
    if horizon is None:
        horizon = math.ceil(math.log(1e-4) / math.log(problem.gamma))
    rng = np.random.default_rng(seed)
    policy_cdf = np.cumsum(policy, axis=1)
    transition_cdf = np.cumsum(problem.transition, axis=2)
    rewards = problem.rewards[task_index]

    def _draw(cdf_rows: np.ndarray) -> np.ndarray:
        u = rng.random(cdf_rows.shape[0])
        idx = (u[:, None] >= cdf_rows).sum(axis=1)
        return np.minimum(idx, cdf_rows.shape[1] - 1)

    states = _draw(np.broadcast_to(np.cumsum(problem.rho), (n_episodes, problem.n_states)))
    returns = np.zeros(n_episodes)
    discount = 1.0
    for _ in range(horizon):
        actions = _draw(policy_cdf[states])
        returns += discount * rewards[states, actions]
        states = _draw(transition_cdf[states, actions])
        discount *= problem.gamma
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(n_episodes))


def optimal_policy(
    problem: MultiTaskProblem, weights: Optional[Sequence[float]] = None
) -> np.ndarray:
    """
    Return a deterministic optimal policy for the weighted reward sum_i w_i r_i by policy iteration.

    :param MultiTaskProblem problem: Problem (bounds are ignored).
    :param Optional[Sequence[float]] weights: Task weights. Default is 1/N each (the average value).
    :return: Deterministic PolicyTable.
    """
    if weights is None:
        weights = np.full(problem.n_tasks, 1.0 / problem.n_tasks)
    reward = np.einsum("n,nsa->sa", np.asarray(weights, dtype=float), problem.rewards)
    actions = np.zeros(problem.n_states, dtype=int)
    for _ in range(10 * problem.n_states * problem.n_actions + 10):
        P_pi = problem.transition[np.arange(problem.n_states), actions]
        V = np.linalg.solve(
            np.eye(problem.n_states) - problem.gamma * P_pi,
            reward[np.arange(problem.n_states), actions],
        )
        Q = reward + problem.gamma * problem.transition @ V
        best = np.argmax(Q, axis=1)
        # Switch only on strict improvement so ties cannot cycle.
        current = Q[np.arange(problem.n_states), actions]
        improve = Q[np.arange(problem.n_states), best] > current + 1e-12 * max(
            1.0, np.abs(current).max()
        )
        if not improve.any():
            break
        actions = np.where(improve, best, actions)
    return deterministic_policy(actions, problem.n_actions)


def bind_lower_bound(
    problem: MultiTaskProblem, task_index: int, fraction: float = 0.5
) -> MultiTaskProblem:
    """
    Return a copy of `problem` whose lower bound on one task binds at the unconstrained optimum.

    The bound is placed `fraction` of the way from the task's value under the
    average-value optimal policy to its best achievable value.

    :param MultiTaskProblem problem: Problem.
    :param int task_index: Task to constrain.
    :param float fraction: Position in (0, 1) of the bound between the two values.
    :return: Problem with the new lower bound.
    """
    if not 0.0 < fraction < 1.0:
        raise DataException(f"Fraction {fraction} outside (0, 1)!")
    unconstrained = task_values(problem, optimal_policy(problem))[task_index]
    weights = np.zeros(problem.n_tasks)
    weights[task_index] = 1.0
    best = task_values(problem, optimal_policy(problem, weights))[task_index]
    if best - unconstrained < 1e-9:
        raise DataException(
            f"Task {task_index} is already at its best value under the unconstrained optimum; no bound can bind!"
        )
    lower = problem.lower_bounds.copy()
    lower[task_index] = unconstrained + fraction * (best - unconstrained)
    logger.info(
        "Binding task %i lower bound at %.6f (unconstrained %.6f, best %.6f)",
        task_index,
        lower[task_index],
        unconstrained,
        best,
    )
    return with_bounds(problem, lower=lower)


def _occupancy(problem: MultiTaskProblem, policy: np.ndarray) -> np.ndarray:
    return discounted_visitation(problem, policy)[:, None] * policy


def tiny_cmdp_oracle(problem: MultiTaskProblem) -> OracleResult:
    """
    Approximate the constrained optimum of a tiny CMDP by grid search.

    Every deterministic policy is evaluated; the search then runs over mixtures of
    pairs of deterministic policies in occupancy-measure space at resolution 1/40,
    refined once at resolution 1/200 around the incumbent. Values are linear in the
    occupancy measure, so each grid point is exactly achievable; the certificate policy
    is read off the mixed occupancy measure.

    .. note::
        Exact up to grid resolution when at most one constraint binds at the optimum.
        Searching pairwise mixtures instead of a per-state product grid over mixed
        policies loses up to `resolution_error` = |V_0(i) - V_0(j)| / 200 for the
        incumbent pair; rate checks against this oracle add it to their tolerance.
        With two or more binding constraints the optimum may need a mixture of three
        or more deterministic policies, and the returned value is then only a lower bound.

    :param MultiTaskProblem problem: Problem with |A|^|S| <= 729 and N <= 3.
    :return: OracleResult; `feasible` is False when no grid point satisfies the bounds.
    """
    n_policies = problem.n_actions ** problem.n_states
    if n_policies > MAX_ORACLE_POLICIES or problem.n_tasks > MAX_ORACLE_TASKS:
        raise DataException(
            f"Oracle needs at most {MAX_ORACLE_POLICIES} deterministic policies and {MAX_ORACLE_TASKS} tasks; got {n_policies} and {problem.n_tasks}!"
        )

    logger.info("Evaluating %i deterministic policies...", n_policies)
    action_sets = list(itertools.product(range(problem.n_actions), repeat=problem.n_states))
    policies = [deterministic_policy(a, problem.n_actions) for a in action_sets]
    values = np.array([task_values(problem, p) for p in policies])
    objective = values.mean(axis=1)
    lower = problem.lower_bounds - FEASIBILITY_TOL
    upper = problem.upper_bounds + FEASIBILITY_TOL

    def _search(pairs_i: Sequence[int], weights: np.ndarray, j_of=None):
        best = (-np.inf, None, None, None)
        for i in pairs_i:
            js = np.arange(i, n_policies) if j_of is None else np.array([j_of])
            # mixed[j, p, task] = w_p V_i + (1 - w_p) V_j
            mixed = (
                weights[None, :, None] * values[i][None, None, :]
                + (1.0 - weights)[None, :, None] * values[js][:, None, :]
            )
            ok = np.all((mixed >= lower) & (mixed <= upper), axis=2)
            if not ok.any():
                continue
            score = np.where(ok, mixed.mean(axis=2), -np.inf)
            jj, pp = np.unravel_index(np.argmax(score), score.shape)
            if score[jj, pp] > best[0]:
                best = (float(score[jj, pp]), i, int(js[jj]), float(weights[pp]))
        return best

    coarse = np.linspace(0.0, 1.0, ORACLE_COARSE_STEPS + 1)
    value, i, j, w = _search(range(n_policies), coarse)
    if i is None:
        logger.info("No feasible point on the coarse grid; searching the fine grid...")
        value, i, j, w = _search(
            range(n_policies), np.linspace(0.0, 1.0, ORACLE_FINE_STEPS + 1)
        )
    if i is None:
        logger.warning("Constrained oracle found no feasible grid point!")
        return OracleResult(
            value=float("nan"), policy=None, feasible=False, resolution_error=float("inf")
        )

    step = 1.0 / ORACLE_COARSE_STEPS
    fine = np.arange(
        max(0.0, w - step), min(1.0, w + step) + 0.5 / ORACLE_FINE_STEPS, 1.0 / ORACLE_FINE_STEPS
    )
    fine = np.clip(fine, 0.0, 1.0)
    refined = _search([i], fine, j_of=j)
    if refined[1] is not None and refined[0] > value:
        value, i, j, w = refined

    occupancy = w * _occupancy(problem, policies[i]) + (1.0 - w) * _occupancy(
        problem, policies[j]
    )
    mass = occupancy.sum(axis=1, keepdims=True)
    certificate = np.where(mass > 0, occupancy / np.where(mass > 0, mass, 1.0), policies[i])
    resolution_error = abs(objective[i] - objective[j]) / ORACLE_FINE_STEPS
    logger.info(
        "Constrained oracle value %.8f (pair %i/%i, weight %.4f)", value, i, j, w
    )
    return OracleResult(
        value=value,
        policy=certificate,
        feasible=True,
        resolution_error=float(resolution_error),
    )


def value_bundle_to_csv(bundle: ValueBundle, path: str) -> None:
    """
    Write a ValueBundle as CSV with columns s, a, Q, A.

    :param ValueBundle bundle: Bundle to export.
    :param str path: Output path.
    :return: None.
    """
    n_states, n_actions = bundle.Q.shape
    s, a = np.meshgrid(np.arange(n_states), np.arange(n_actions), indexing="ij")
    pd.DataFrame(
        {"s": s.ravel(), "a": a.ravel(), "Q": bundle.Q.ravel(), "A": bundle.A.ravel()}
    ).to_csv(path, index=False, float_format=FLOAT_FORMAT)
