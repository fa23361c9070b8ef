import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from cmtrl.resources.resource_utils import ConfigException, DataException
from cmtrl.utils.consensus_net import (
    CommGraph,
    WeightMatrix,
    as_weight_matrix,
    consensus_error,
)
from cmtrl.utils.env_core import MultiTaskProblem
from cmtrl.utils.exact_eval import evaluate_all_tasks, violation_of_values
from cmtrl.utils.pdnpg import (
    DualState,
    central_actor_step,
    check_consensus_bound,
    compute_b_lambda,
    consensus_error_bound,
    default_alpha0,
    dual_step,
    npg_actor_step,
    softmax_policy,
)
from cmtrl.utils.trace import MetricsTrace, TraceWriter


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("pdnac_utils")
logger.setLevel(logging.INFO)


class Transition(NamedTuple):
    """One observed step (s, a) -> (s', a') of a sampler cursor."""

    state: int
    action: int
    next_state: int
    next_action: int


@dataclass
class SamplerCursor:
    """
    Current (s, a) of one agent's single continuing trajectory.

    The generator is owned by this cursor alone; `n_transitions` counts the samples drawn.
    """

    state: int
    action: int
    stream_id: int
    rng: np.random.Generator
    n_transitions: int = 0


def agent_streams(seed: int, n: int) -> List[np.random.Generator]:
    """
    Return `n` independent counter-based (Philox) generators spawned from one seed.

    :param int seed: Root seed.
    :param int n: Number of streams; stream i belongs to agent (or task) i.
    :return: List of generators.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def sample_index(probs: np.ndarray, u: float) -> int:
    """Return the inverse-CDF draw of index from `probs` for a uniform u in [0, 1)."""
    return min(int(np.searchsorted(np.cumsum(probs), u, side="right")), probs.shape[0] - 1)


def mix_behavior(policy: np.ndarray, eps: float) -> np.ndarray:
    """
    Return the eps-mixed behavior policy eps/|A| + (1 - eps) pi.

    :param np.ndarray policy: Target PolicyTable (or a stack of them).
    :param float eps: Exploration weight in [0, 1].
    :return: Behavior PolicyTable.
    """
    if not 0.0 <= eps <= 1.0:
        raise DataException(f"Exploration weight {eps} outside [0, 1]!")
    return eps / policy.shape[-1] + (1.0 - eps) * policy


def init_cursor(
    problem: MultiTaskProblem,
    behavior: np.ndarray,
    rng: np.random.Generator,
    stream_id: int,
) -> SamplerCursor:
    """Draw s0 ~ rho and a0 ~ behavior(.|s0) on the cursor's own stream."""
    state = sample_index(problem.rho, rng.random())
    action = sample_index(behavior[state], rng.random())
    return SamplerCursor(state=state, action=action, stream_id=stream_id, rng=rng)


def markov_step(
    problem: MultiTaskProblem, cursor: SamplerCursor, behavior: np.ndarray
) -> Transition:
    """
    Advance a cursor by one step: s' ~ P(.|s,a), then a' ~ behavior(.|s').

    :param MultiTaskProblem problem: Problem.
    :param SamplerCursor cursor: Cursor to advance in place.
    :param np.ndarray behavior: Behavior PolicyTable.
    :return: Transition record of the step.
    """
    u_state, u_action = cursor.rng.random(2)
    next_state = sample_index(problem.transition[cursor.state, cursor.action], u_state)
    next_action = sample_index(behavior[next_state], u_action)
    record = Transition(cursor.state, cursor.action, next_state, next_action)
    cursor.state, cursor.action = next_state, next_action
    cursor.n_transitions += 1
    return record


def td0_update(
    critic: np.ndarray,
    transition: Transition,
    reward: float,
    gamma: float,
    beta: float,
) -> np.ndarray:
    """
    Return the critic after one TD(0) update of entry (s, a).

    Q'(s, a) = (1 - beta) Q(s, a) + beta (r + gamma Q(s', a')); other entries are unchanged.

    :param np.ndarray critic: |S| x |A| table.
    :param Transition transition: Observed step.
    :param float reward: r(s, a) of the critic's task.
    :param float gamma: Discount factor.
    :param float beta: Critic step size in (0, 1].
    :return: Updated copy of the table.
    """
    if not 0.0 < beta <= 1.0:
        raise DataException(f"Critic step size {beta} outside (0, 1]!")
    s, a, s_next, a_next = transition
    target = reward + gamma * critic[s_next, a_next]
    updated = critic.copy()
    updated[s, a] = (1.0 - beta) * critic[s, a] + beta * target
    return updated


def estimated_values(
    rho: np.ndarray, policies: np.ndarray, critics: np.ndarray
) -> np.ndarray:
    """Return V_hat_i = sum_{s,a} rho(s) pi_i(a|s) Q_hat_i(s,a) for every agent."""
    return np.einsum("s,nsa,nsa->n", rho, policies, critics)


def ac_dual_step(
    dual: DualState,
    rho: np.ndarray,
    policies: np.ndarray,
    critics: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    eta: float,
) -> DualState:
    """
    Dual step driven by critic-based value estimates instead of exact values.

    :param DualState dual: Current duals.
    :param np.ndarray rho: Initial distribution.
    :param np.ndarray policies: N x |S| x |A| target policies pi_i (not the behavior policies).
    :param np.ndarray critics: N x |S| x |A| critic tables.
    :param np.ndarray lower: Lower bounds.
    :param np.ndarray upper: Upper bounds.
    :param float eta: Dual step size.
    :return: New DualState.
    """
    return dual_step(dual, estimated_values(rho, policies, critics), lower, upper, eta)


def check_step_size_premise(
    problem: MultiTaskProblem, mu_lower: float, eps0: float, beta0: float
) -> bool:
    """
    Check (1 - gamma) mu_lower eps0 beta0 / |A| <= 1 and warn when it fails.

    :return: True when the premise holds.
    """
    value = (1.0 - problem.gamma) * mu_lower * eps0 * beta0 / problem.n_actions
    if value > 1.0:
        logger.warning(
            "Step-size premise (1-gamma) mu eps0 beta0 / |A| = %.4f exceeds 1", value
        )
        return False
    return True


def ac_schedule(
    K: int, alpha0: float, beta0: float, eta0: float, eps0: float
) -> Tuple[float, float, float, float]:
    """
    Return (alpha, beta, eta, eps) = (alpha0/K^(5/6), beta0/K^(1/2), eta0/K^(5/6), eps0/K^(1/6)).

    Raises ConfigException when beta leaves (0, 1] or eps leaves [0, 1].
    """
    alpha = alpha0 / K ** (5.0 / 6.0)
    beta = beta0 / math.sqrt(K)
    eta = eta0 / K ** (5.0 / 6.0)
    eps = eps0 / K ** (1.0 / 6.0)
    if not 0.0 < beta <= 1.0:
        raise ConfigException("/beta0", f"critic step size beta0/sqrt(K) = {beta} outside (0, 1]")
    if not 0.0 <= eps <= 1.0:
        raise ConfigException("/eps0", f"exploration eps0/K^(1/6) = {eps} outside [0, 1]")
    return alpha, beta, eta, eps


def run_frozen_critic(
    problem: MultiTaskProblem,
    task_index: int,
    behavior: np.ndarray,
    n_steps: int,
    beta: float,
    seed: int,
) -> np.ndarray:
    """
    Run tabular TD(0) on one continuing trajectory under a fixed behavior policy.

    Uses the same sampler and critic update as `run_pdnac`.

    :param MultiTaskProblem problem: Problem.
    :param int task_index: Task whose reward the critic learns.
    :param np.ndarray behavior: Fixed behavior PolicyTable.
    :param int n_steps: Number of transitions.
    :param float beta: Constant critic step size.
    :param int seed: Seed of the (single) stream.
    :return: |S| x |A| critic after `n_steps` updates.
    """
    if not 0.0 < beta <= 1.0:
        raise DataException(f"Critic step size {beta} outside (0, 1]!")
    cursor = init_cursor(problem, behavior, agent_streams(seed, 1)[0], 0)
    rewards = problem.rewards[task_index]
    critic = np.zeros((problem.n_states, problem.n_actions))
    for _ in range(n_steps):
        record = markov_step(problem, cursor, behavior)
        critic = td0_update(
            critic, record, rewards[record.state, record.action], problem.gamma, beta
        )
    return critic


def run_pdnac(
    problem: MultiTaskProblem,
    graph: Union[CommGraph, WeightMatrix],
    K: int,
    alpha0: Optional[float] = None,
    beta0: float = 0.5,
    eta0: float = 1.0,
    eps0: float = 0.5,
    mode: str = "decentral",
    mu_lower: Optional[float] = None,
    seed: int = 0,
    c_alpha: float = 1.0,
    eval_every: int = 1,
    progress: bool = False,
    writer: Optional[TraceWriter] = None,
    header: Optional[Dict] = None,
) -> MetricsTrace:
    """
    Run online single-trajectory primal-dual natural actor-critic for K iterations.

    Per iteration and agent, in order: observe one transition under the behavior
    policy, TD(0)-update the critic, step the actor with the pre-update critic
    Q_hat^k, refresh the eps-mixed behavior policy, and step the duals with the
    post-update critic weighted by the target policy pi^k. Exactly N transitions are
    consumed per iteration. In `mode="central"` a single policy is shared and each task
    keeps its own critic, cursor and stream.

    :param MultiTaskProblem problem: Problem with one task per agent.
    :param graph: Communication graph or weights.
    :param int K: Number of iterations.
    :param Optional[float] alpha0: Actor constant. Default is c_alpha sqrt(1 - sigma2) / N^(1/4).
    :param float beta0: Critic constant.
    :param float eta0: Dual constant.
    :param float eps0: Exploration constant.
    :param str mode: 'central' or 'decentral'.
    :param Optional[float] mu_lower: Configured lower bound on stationary state mass. Default is 1/(4|S|).
    :param int seed: Root seed of the per-agent streams.
    :param float c_alpha: Constant c of the default alpha0.
    :param int eval_every: Recording stride (exact evaluation at recorded iterations).
    :param bool progress: Show a progress bar.
    :param Optional[TraceWriter] writer: Incremental CSV sink.
    :param Optional[Dict] header: Extra header entries.
    :return: MetricsTrace.
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
    alpha, beta, eta, eps = ac_schedule(K, alpha0, beta0, eta0, eps0)
    if mu_lower is None:
        mu_lower = 1.0 / (4 * problem.n_states)
    premise = check_step_size_premise(problem, mu_lower, eps0, beta0)
    b_lambda = compute_b_lambda(problem)
    critic_bound = problem.r_max / (1.0 - problem.gamma) + 1.0
    bound = consensus_error_bound(problem, n, alpha, sigma2, critic_bound)

    trace = MetricsTrace(
        n_tasks=n,
        header={
            **(header or {}),
            "algorithm": "pdnac",
            "mode": mode,
            "b_lambda": b_lambda,
            "sigma2": sigma2,
            "r_max": problem.r_max,
            "alpha": alpha,
            "beta": beta,
            "eta": eta,
            "eps": eps,
            "consensus_bound": bound,
            "streams": f"philox:{seed}:" + ",".join(str(i) for i in range(n)),
        },
        writer=writer,
    ).start()
    trace.summary.update({"consensus_bound_violations": 0, "step_size_premise": premise})
    logger.info(
        "Running PDNAC (%s) for %i iterations with alpha=%.3e, beta=%.3e, eta=%.3e, eps=%.3e",
        mode,
        K,
        alpha,
        beta,
        eta,
        eps,
    )

    n_params = 1 if mode == "central" else n
    thetas = np.zeros((n_params, problem.n_states, problem.n_actions))
    critics = np.zeros((n, problem.n_states, problem.n_actions))
    dual = DualState.zeros(n, b_lambda)
    policies = softmax_policy(thetas)
    behaviors = mix_behavior(policies, eps)
    streams = agent_streams(seed, n)

    def _policy_of(i: int) -> int:
        return 0 if mode == "central" else i

    cursors = [
        init_cursor(problem, behaviors[_policy_of(i)], streams[i], i) for i in range(n)
    ]

    for k in tqdm(range(K + 1), unit="iteration", disable=not progress):
        if k % eval_every == 0 or k == K:
            _record(trace, problem, k, thetas, policies, behaviors, critics, dual, mode)
            check_consensus_bound(trace, trace.rows[-1][n + 4], bound, k)
        if k == K:
            break

        # observe -> critic
        old_critics = critics.copy()
        for i in range(n):
            record = markov_step(problem, cursors[i], behaviors[_policy_of(i)])
            critics[i] = td0_update(
                critics[i],
                record,
                problem.rewards[i, record.state, record.action],
                problem.gamma,
                beta,
            )

        # actor with Q_hat^k, then behavior refresh
        target_policies = np.array([policies[_policy_of(i)] for i in range(n)])
        if mode == "central":
            thetas = central_actor_step(thetas[0], old_critics, dual, alpha)[None]
        else:
            thetas = npg_actor_step(thetas, weights, old_critics, dual, alpha)
        policies = softmax_policy(thetas)
        behaviors = mix_behavior(policies, eps)

        dual = ac_dual_step(
            dual,
            problem.rho,
            target_policies,
            critics,
            problem.lower_bounds,
            problem.upper_bounds,
            eta,
        )

    trace.final_params = thetas
    trace.final_policies = policies
    trace.summary["iterations"] = K
    trace.summary["transitions"] = sum(c.n_transitions for c in cursors)
    trace.close()
    logger.info(
        "PDNAC finished after %i transitions; consensus bound breaches: %i",
        trace.summary["transitions"],
        trace.summary["consensus_bound_violations"],
    )
    return trace


def _record(
    trace: MetricsTrace,
    problem: MultiTaskProblem,
    k: int,
    thetas: np.ndarray,
    policies: np.ndarray,
    behaviors: np.ndarray,
    critics: np.ndarray,
    dual: DualState,
    mode: str,
) -> None:
    """Append one row per agent with exact values and the critic error ||Q_hat_i - Q_i^behavior||_inf."""
    error = 0.0 if mode == "central" else consensus_error(thetas)
    target = [evaluate_all_tasks(problem, p) for p in policies]
    behavior = [evaluate_all_tasks(problem, b) for b in behaviors]
    for j in range(problem.n_tasks):
        p = 0 if mode == "central" else j
        values = np.array([b.V_rho for b in target[p]])
        critic_error = float(np.max(np.abs(critics[j] - behavior[p][j].Q)))
        trace.add_row(
            k,
            j,
            values,
            violation_of_values(values, problem.lower_bounds, problem.upper_bounds),
            error,
            critic_error,
            dual.lam,
            dual.nu,
        )
