import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import networkx as nx
import numpy as np
from scipy.special import softmax
from tqdm import tqdm

from cmtrl.resources.resource_utils import (
    APPROXIMATION_SLACK,
    ConfigException,
    DataException,
    NumericalFailure,
    PROJECTED_BELLMAN_TOL,
    STATIONARY_RESIDUAL_TOL,
)
from cmtrl.utils.consensus_net import (
    CommGraph,
    WeightMatrix,
    as_weight_matrix,
    consensus_error,
)
from cmtrl.utils.env_core import MultiTaskProblem
from cmtrl.utils.exact_eval import (
    evaluate_all_tasks,
    induced_chain,
    random_policy,
    violation_of_values,
)
from cmtrl.utils.pdnac import (
    Transition,
    ac_dual_step,
    agent_streams,
    check_step_size_premise,
    init_cursor,
    markov_step,
    mix_behavior,
)
from cmtrl.utils.pdnpg import (
    DualState,
    central_actor_step,
    compute_b_lambda,
    npg_actor_step,
)
from cmtrl.utils.trace import MetricsTrace, TraceWriter


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("lfa_utils")
logger.setLevel(logging.INFO)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """
    Feature matrix Phi with one row phi(s, a) per state-action pair (row index s * |A| + a).

    Rows have norm at most 1 and Phi has full column rank.
    """

    phi: np.ndarray
    n_actions: int
    sigma_min: float
    sigma_max: float
    name: str = "custom"

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @classmethod
    def from_matrix(
        cls, phi: np.ndarray, n_actions: int, name: str = "custom"
    ) -> "FeatureSet":
        """
        Wrap a feature matrix after checking row norms and rank.

        :param np.ndarray phi: (|S||A|) x d matrix.
        :param int n_actions: Number of actions |A|.
        :param str name: Label recorded in trace headers.
        :return: FeatureSet.
        """
        if np.max(np.linalg.norm(phi, axis=1)) > 1.0 + 1e-12:
            raise DataException("Feature rows must have norm at most 1!")
        singular = np.linalg.svd(phi, compute_uv=False)
        sigma_min = float(singular[-1]) if phi.shape[1] <= phi.shape[0] else 0.0
        if sigma_min <= 1e-12:
            raise DataException(f"Feature matrix {name} is rank deficient!")
        return cls(
            phi=phi,
            n_actions=n_actions,
            sigma_min=sigma_min,
            sigma_max=float(singular[0]),
            name=name,
        )


def identity_features(n_states: int, n_actions: int) -> FeatureSet:
    """Return tabular features Phi = I."""
    return FeatureSet.from_matrix(np.eye(n_states * n_actions), n_actions, name="identity")


def tile_features(n_states: int, n_actions: int, width: int) -> FeatureSet:
    """
    Return state-aggregation features: one-hot over (tile of `width` consecutive states, action).

    :param int n_states: Number of states.
    :param int n_actions: Number of actions.
    :param int width: States per tile.
    :return: FeatureSet with d = ceil(|S| / width) |A|.
    """
    if width < 1:
        raise DataException(f"Tile width must be at least 1; got {width}!")
    n_tiles = math.ceil(n_states / width)
    phi = np.zeros((n_states * n_actions, n_tiles * n_actions))
    for s in range(n_states):
        for a in range(n_actions):
            phi[s * n_actions + a, (s // width) * n_actions + a] = 1.0
    return FeatureSet.from_matrix(phi, n_actions, name=f"tiles:{width}")


def random_features(n_states: int, n_actions: int, d: int, seed: int) -> FeatureSet:
    """
    Return random orthonormal columns rescaled so the largest row norm is 1.

    :param int n_states: Number of states.
    :param int n_actions: Number of actions.
    :param int d: Feature dimension (at most |S||A|).
    :param int seed: Seed of the generator.
    :return: FeatureSet.
    """
    if not 1 <= d <= n_states * n_actions:
        raise DataException(f"Random feature dimension {d} outside [1, |S||A|]!")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n_states * n_actions, d)))
    phi = basis / np.max(np.linalg.norm(basis, axis=1))
    return FeatureSet.from_matrix(phi, n_actions, name=f"random:{d}")


def build_features(spec: str, n_states: int, n_actions: int, seed: int = 0) -> FeatureSet:
    """
    Build a preset feature set from its config string.

    :param str spec: 'identity', 'tiles:<w>' or 'random:<d>'.
    :param int n_states: Number of states.
    :param int n_actions: Number of actions.
    :param int seed: Seed for random features.
    :return: FeatureSet.
    """
    name, _, arg = spec.partition(":")
    try:
        if name == "identity" and not arg:
            return identity_features(n_states, n_actions)
        if name == "tiles":
            return tile_features(n_states, n_actions, int(arg))
        if name == "random":
            return random_features(n_states, n_actions, int(arg), seed)
    except ValueError as e:
        raise ConfigException("/features", f"bad argument in {spec!r}") from e
    except DataException as e:
        raise ConfigException("/features", str(e)) from e
    raise ConfigException("/features", "expected identity, tiles:<w> or random:<d>")


def compute_b_omega(
    features: FeatureSet, gamma: float, eps_max: float, r_max: float
) -> float:
    """
    Return the critic projection radius sigma_min^-1 (R_max sqrt(|S||A| / (1 - gamma)) + eps_max).

    :param FeatureSet features: Features.
    :param float gamma: Discount factor.
    :param float eps_max: Configured approximation-error ceiling.
    :param float r_max: Largest absolute reward.
    :return: B_omega.
    """
    if features.sigma_min <= 0:
        raise DataException("B_omega needs full-rank features!")
    n_sa = features.phi.shape[0]
    return (r_max * math.sqrt(n_sa / (1.0 - gamma)) + eps_max) / features.sigma_min


def loglinear_policy(
    theta: np.ndarray, features: FeatureSet, n_states: int, n_actions: int
) -> np.ndarray:
    """
    Return pi(a|s) proportional to exp(phi(s, a)^T theta).

    :param np.ndarray theta: Actor parameter in R^d.
    :param FeatureSet features: Features.
    :param int n_states: Number of states.
    :param int n_actions: Number of actions.
    :return: PolicyTable.
    """
    if not np.all(np.isfinite(theta)):
        raise DataException("Policy parameters contain NaN or infinite entries!")
    return softmax((features.phi @ theta).reshape(n_states, n_actions), axis=1)


def stationary_distribution(transition: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """
    Return the stationary distribution mu = mu P^pi of the chain induced by a policy.

    One balance equation is replaced by the normalization row. The chain must have a
    single closed communicating class (checked on the transition graph).

    :param np.ndarray transition: |S| x |A| x |S| transition table.
    :param np.ndarray policy: PolicyTable.
    :return: Distribution over states.
    """
    P_pi = induced_chain(transition, policy)
    n = P_pi.shape[0]
    graph = nx.DiGraph()
    graph.add_nodes_from(range(n))
    graph.add_edges_from(zip(*np.nonzero(P_pi > 0)))
    condensed = nx.condensation(graph)
    closed = [c for c in condensed.nodes if condensed.out_degree(c) == 0]
    if len(closed) != 1:
        raise NumericalFailure(
            f"Induced chain has {len(closed)} closed classes; the stationary distribution is not unique. Use an eps-mixed policy!"
        )
    system = P_pi.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        mu = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(
            "Stationary distribution solve is singular. Use an eps-mixed policy!"
        ) from e
    residual = np.max(np.abs(mu @ P_pi - mu))
    if residual > STATIONARY_RESIDUAL_TOL or np.any(mu < -STATIONARY_RESIDUAL_TOL):
        raise NumericalFailure(
            f"Stationary distribution residual {residual:.3e} too large or negative mass!"
        )
    return np.clip(mu, 0.0, None)


def assemble_hbar_bbar(
    problem: MultiTaskProblem, task_index: int, policy: np.ndarray, features: FeatureSet
):
    """
    Assemble H = Phi^T M (gamma P~ Phi - Phi) and b = Phi^T M r for one task.

    M is the diagonal of mu_pi(s) pi(a|s) and P~ is the state-action transition matrix
    P~((s, a), (s', a')) = P(s'|s, a) pi(a'|s').

    :param MultiTaskProblem problem: Problem.
    :param int task_index: Task whose reward enters b.
    :param np.ndarray policy: PolicyTable generating the samples.
    :param FeatureSet features: Features.
    :return: Tuple (H, b) of shapes d x d and d.
    """
    mu = stationary_distribution(problem.transition, policy)
    weights = (mu[:, None] * policy).ravel()
    P_sa = (
        problem.transition[:, :, :, None] * policy[None, None, :, :]
    ).reshape(problem.n_states * problem.n_actions, -1)
    phi = features.phi
    weighted = phi.T * weights
    H = weighted @ (problem.gamma * P_sa @ phi - phi)
    b = weighted @ problem.rewards[task_index].ravel()
    return H, b


def solve_projected_bellman(
    problem: MultiTaskProblem, task_index: int, policy: np.ndarray, features: FeatureSet
) -> np.ndarray:
    """
    Return omega* solving the projected Bellman equation H omega + b = 0.

    :param MultiTaskProblem problem: Problem.
    :param int task_index: Task.
    :param np.ndarray policy: Completely mixed PolicyTable.
    :param FeatureSet features: Features.
    :return: omega* in R^d.
    """
    if np.any(policy <= 0):
        raise DataException("Projected Bellman solve needs a completely mixed policy!")
    H, b = assemble_hbar_bbar(problem, task_index, policy, features)
    try:
        omega = -np.linalg.solve(H, b)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure("Projected Bellman matrix is singular!") from e
    residual = np.linalg.norm(H @ omega + b)
    if residual > PROJECTED_BELLMAN_TOL * max(1.0, np.linalg.norm(b)):
        raise NumericalFailure(f"Projected Bellman residual {residual:.3e} too large!")
    return omega


def approximation_error(
    problem: MultiTaskProblem, task_index: int, policy: np.ndarray, features: FeatureSet
) -> float:
    """Return ||Phi omega*(pi) - Q^pi||_inf for one task."""
    omega = solve_projected_bellman(problem, task_index, policy, features)
    Q = evaluate_all_tasks(problem, policy)[task_index].Q
    return float(np.max(np.abs(features.phi @ omega - Q.ravel())))


def measure_eps_max(
    problem: MultiTaskProblem,
    features: FeatureSet,
    n_policies: int,
    eps: float,
    seed: int,
) -> float:
    """
    Return the largest ||Phi omega* - Q^pi||_inf over random eps-mixed policies and all tasks.

    :param MultiTaskProblem problem: Problem.
    :param FeatureSet features: Features.
    :param int n_policies: Number of random policies.
    :param float eps: Uniform mixing weight (> 0 keeps the policies completely mixed).
    :param int seed: Seed of the generator.
    :return: Suggested eps_max.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_policies):
        policy = random_policy(problem.n_states, problem.n_actions, rng, eps)
        for i in range(problem.n_tasks):
            worst = max(worst, approximation_error(problem, i, policy, features))
    logger.info(
        "Largest approximation error over %i policies: %.6e", n_policies, worst
    )
    return worst


def project_ball(x: np.ndarray, radius: float) -> np.ndarray:
    """Return the Euclidean projection of x onto the ball of the given radius."""
    norm = np.linalg.norm(x)
    if norm <= radius:
        return x
    return x * (radius / norm)


def projected_td_step(
    omega: np.ndarray,
    features: FeatureSet,
    transition: Transition,
    reward: float,
    gamma: float,
    beta: float,
    radius: float,
) -> np.ndarray:
    """
    Semi-gradient linear TD step followed by projection onto the B_omega ball.

    :param np.ndarray omega: Current critic parameter.
    :param FeatureSet features: Features.
    :param Transition transition: Observed step.
    :param float reward: r(s, a) of the critic's task.
    :param float gamma: Discount factor.
    :param float beta: Critic step size in (0, 1].
    :param float radius: Projection radius B_omega.
    :return: New critic parameter.
    """
    if not 0.0 < beta <= 1.0:
        raise DataException(f"Critic step size {beta} outside (0, 1]!")
    n_actions = features.n_actions
    phi = features.phi[transition.state * n_actions + transition.action]
    phi_next = features.phi[transition.next_state * n_actions + transition.next_action]
    td_error = reward + (gamma * phi_next - phi) @ omega
    return project_ball(omega + beta * td_error * phi, radius)


def lfa_schedule(
    delta: float,
    sigma2: float,
    n_agents: int,
    alpha0: float = 1.0,
    beta0: float = 1.0,
    eta0: float = 1.0,
    eps0: float = 1.0,
) -> Dict[str, float]:
    """
    Return step sizes and loop lengths for target precision delta.

    alpha = alpha0 delta sqrt(1 - sigma2) / N^(1/4), beta = beta0 delta^3 / log(1/delta),
    eps = eps0 delta, eta = eta0 delta, T = ceil(log(N/delta) / (beta eps)), K = ceil(delta^-2).

    :param float delta: Target precision in (0, 1).
    :param float sigma2: Second singular value of W.
    :param int n_agents: Number of agents.
    :return: Dict with keys alpha, beta, eps, eta, T, K.
    """
    if not 0.0 < delta < 1.0:
        raise ConfigException("/delta", f"target precision {delta} outside (0, 1)")
    alpha = alpha0 * delta * math.sqrt(1.0 - sigma2) / n_agents ** 0.25
    beta = beta0 * delta ** 3 / math.log(1.0 / delta)
    eps = eps0 * delta
    eta = eta0 * delta
    if not 0.0 < beta <= 1.0:
        raise ConfigException("/beta0", f"critic step size {beta} outside (0, 1]")
    if not 0.0 <= eps <= 1.0:
        raise ConfigException("/eps0", f"exploration {eps} outside [0, 1]")
    T = math.ceil(math.log(n_agents / delta) / (beta * eps)) if eps > 0 else 1
    return {
        "alpha": alpha,
        "beta": beta,
        "eps": eps,
        "eta": eta,
        "T": max(1, T),
        "K": math.ceil(delta ** -2),
    }


def run_frozen_projected_td(
    problem: MultiTaskProblem,
    task_index: int,
    behavior: np.ndarray,
    features: FeatureSet,
    n_steps: int,
    beta: float,
    radius: float,
    seed: int,
) -> np.ndarray:
    """
    Run the projected linear TD inner loop under a fixed behavior policy.

    :param MultiTaskProblem problem: Problem.
    :param int task_index: Task whose reward the critic learns.
    :param np.ndarray behavior: Fixed behavior PolicyTable.
    :param FeatureSet features: Features.
    :param int n_steps: Number of transitions.
    :param float beta: Constant critic step size.
    :param float radius: Projection radius B_omega.
    :param int seed: Seed of the (single) stream.
    :return: Critic parameter after `n_steps` updates.
    """
    cursor = init_cursor(problem, behavior, agent_streams(seed, 1)[0], 0)
    rewards = problem.rewards[task_index]
    omega = np.zeros(features.d)
    for _ in range(n_steps):
        record = markov_step(problem, cursor, behavior)
        omega = projected_td_step(
            omega,
            features,
            record,
            rewards[record.state, record.action],
            problem.gamma,
            beta,
            radius,
        )
    return omega


def run_lfa(
    problem: MultiTaskProblem,
    graph: Union[CommGraph, WeightMatrix],
    features: FeatureSet,
    K: Optional[int] = None,
    T: Optional[int] = None,
    alpha0: Optional[float] = None,
    beta0: float = 1.0,
    eta0: float = 1.0,
    eps0: float = 1.0,
    eps_max: float = 0.0,
    delta: Optional[float] = None,
    mode: str = "decentral",
    mu_lower: Optional[float] = None,
    seed: int = 0,
    c_alpha: float = 1.0,
    b_omega: Optional[float] = None,
    eval_every: int = 1,
    progress: bool = False,
    writer: Optional[TraceWriter] = None,
    header: Optional[Dict] = None,
) -> MetricsTrace:
    """
    Run the nested-loop actor-critic with linear critics and log-linear actors.

    Each outer iteration runs, per agent, T projected-TD steps on the agent's continuing
    trajectory (the critic is warm-started from the previous outer iteration), then the
    actor step theta_i' = sum_j W_ij theta_j + alpha (1/N + lambda_i - nu_i) omega_i^{k,T},
    the behavior refresh, and a dual step on V_hat_i = sum rho pi_i (Phi omega_i^{k,T}).
    Step sizes follow `lfa_schedule(delta)`; without `delta` the target precision is
    1/sqrt(K). T = 1 gives the single-loop variant.

    :param MultiTaskProblem problem: Problem with one task per agent.
    :param graph: Communication graph or weights.
    :param FeatureSet features: Critic and actor features.
    :param Optional[int] K: Outer iterations. Default is ceil(delta^-2).
    :param Optional[int] T: Inner TD steps. Default is ceil(log(N/delta) / (beta eps)).
    :param Optional[float] alpha0: Actor constant. Default is c_alpha.
    :param float beta0: Critic constant.
    :param float eta0: Dual constant.
    :param float eps0: Exploration constant.
    :param float eps_max: Configured approximation-error ceiling.
    :param Optional[float] delta: Target precision.
    :param str mode: 'central' or 'decentral'.
    :param Optional[float] mu_lower: Configured lower bound on stationary state mass. Default is 1/(4|S|).
    :param int seed: Root seed of the per-agent streams.
    :param float c_alpha: Default alpha0.
    :param Optional[float] b_omega: Projection radius override. Default is `compute_b_omega`.
    :param int eval_every: Recording stride (outer iterations).
    :param bool progress: Show a progress bar.
    :param Optional[TraceWriter] writer: Incremental CSV sink.
    :param Optional[Dict] header: Extra header entries.
    :return: MetricsTrace.
    """
    if eval_every < 1:
        raise DataException(f"eval_every must be at least 1; got {eval_every}!")
    if mode not in ("central", "decentral"):
        raise DataException(f"Unknown mode {mode}!")
    if features.phi.shape[0] != problem.n_states * problem.n_actions:
        raise DataException(
            f"Features have {features.phi.shape[0]} rows for {problem.n_states * problem.n_actions} state-action pairs!"
        )
    weights = as_weight_matrix(graph)
    n = problem.n_tasks
    if weights.n_agents != n:
        raise DataException(
            f"Weight matrix has {weights.n_agents} agents but the problem has {n} tasks!"
        )
    sigma2 = 0.0 if mode == "central" else weights.sigma2
    if delta is None:
        if K is None or K < 2:
            raise ConfigException("/K", "set K >= 2 or a target precision delta")
        delta = 1.0 / math.sqrt(K)
    schedule = lfa_schedule(
        delta, sigma2, n, c_alpha if alpha0 is None else alpha0, beta0, eta0, eps0
    )
    K = schedule["K"] if K is None else K
    T = schedule["T"] if T is None else T
    if K < 1 or T < 1:
        raise DataException(f"K and T must be at least 1; got K={K}, T={T}!")
    alpha, beta, eta, eps = (
        schedule["alpha"],
        schedule["beta"],
        schedule["eta"],
        schedule["eps"],
    )
    if T == 1:
        logger.warning("T = 1: running the single-loop variant")
    if mu_lower is None:
        mu_lower = 1.0 / (4 * problem.n_states)
    premise = check_step_size_premise(problem, mu_lower, eps, beta)
    radius = (
        compute_b_omega(features, problem.gamma, eps_max, problem.r_max)
        if b_omega is None
        else b_omega
    )
    b_lambda = compute_b_lambda(problem)

    trace = MetricsTrace(
        n_tasks=n,
        header={
            **(header or {}),
            "algorithm": "lfa",
            "mode": mode,
            "b_lambda": b_lambda,
            "sigma2": sigma2,
            "r_max": problem.r_max,
            "features": features.name,
            "b_omega": radius,
            "delta": delta,
            "alpha": alpha,
            "beta": beta,
            "eta": eta,
            "eps": eps,
            "T": T,
            "streams": f"philox:{seed}:" + ",".join(str(i) for i in range(n)),
        },
        writer=writer,
    ).start()
    trace.summary.update(
        {"eps_max_exceeded": 0, "max_omega_norm": 0.0, "step_size_premise": premise}
    )
    logger.info(
        "Running nested-loop LFA actor-critic (%s): K=%i, T=%i, alpha=%.3e, beta=%.3e, B_omega=%.3e",
        mode,
        K,
        T,
        alpha,
        beta,
        radius,
    )

    S, A = problem.n_states, problem.n_actions
    n_params = 1 if mode == "central" else n
    thetas = np.zeros((n_params, features.d))
    omegas = np.zeros((n, features.d))
    dual = DualState.zeros(n, b_lambda)

    def _policies(params: np.ndarray) -> np.ndarray:
        return np.array([loglinear_policy(t, features, S, A) for t in params])

    def _policy_of(i: int) -> int:
        return 0 if mode == "central" else i

    policies = _policies(thetas)
    behaviors = mix_behavior(policies, eps)
    streams = agent_streams(seed, n)
    cursors = [
        init_cursor(problem, behaviors[_policy_of(i)], streams[i], i) for i in range(n)
    ]

    for k in tqdm(range(K + 1), unit="outer iteration", disable=not progress):
        if k % eval_every == 0 or k == K:
            _record_lfa(
                trace, problem, features, k, thetas, policies, behaviors, omegas, dual, mode, eps_max
            )
        if k == K:
            break

        for i in range(n):
            behavior = behaviors[_policy_of(i)]
            omega = omegas[i]
            for _ in range(T):
                record = markov_step(problem, cursors[i], behavior)
                omega = projected_td_step(
                    omega,
                    features,
                    record,
                    problem.rewards[i, record.state, record.action],
                    problem.gamma,
                    beta,
                    radius,
                )
            omegas[i] = omega
        trace.summary["max_omega_norm"] = max(
            trace.summary["max_omega_norm"],
            float(np.max(np.linalg.norm(omegas, axis=1))),
        )

        target_policies = np.array([policies[_policy_of(i)] for i in range(n)])
        if mode == "central":
            thetas = central_actor_step(thetas[0], omegas, dual, alpha)[None]
        else:
            thetas = npg_actor_step(thetas, weights, omegas, dual, alpha)
        policies = _policies(thetas)
        behaviors = mix_behavior(policies, eps)

        critic_tables = (omegas @ features.phi.T).reshape(n, S, A)
        dual = ac_dual_step(
            dual,
            problem.rho,
            target_policies,
            critic_tables,
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
        "LFA finished after %i transitions; eps_max exceeded %i times",
        trace.summary["transitions"],
        trace.summary["eps_max_exceeded"],
    )
    return trace


def _record_lfa(
    trace: MetricsTrace,
    problem: MultiTaskProblem,
    features: FeatureSet,
    k: int,
    thetas: np.ndarray,
    policies: np.ndarray,
    behaviors: np.ndarray,
    omegas: np.ndarray,
    dual: DualState,
    mode: str,
    eps_max: float,
) -> None:
    """Append one row per agent and count behavior policies whose approximation error exceeds eps_max."""
    error = 0.0 if mode == "central" else consensus_error(thetas)
    target = [evaluate_all_tasks(problem, p) for p in policies]
    behavior = [evaluate_all_tasks(problem, b) for b in behaviors]
    for j in range(problem.n_tasks):
        p = 0 if mode == "central" else j
        values = np.array([b.V_rho for b in target[p]])
        q_behavior = behavior[p][j].Q.ravel()
        critic_error = float(np.max(np.abs(features.phi @ omegas[j] - q_behavior)))
        if np.all(behaviors[p] > 0):
            measured = approximation_error(problem, j, behaviors[p], features)
        else:
            measured = 0.0
        if measured > eps_max + APPROXIMATION_SLACK:
            trace.summary["eps_max_exceeded"] += 1
            logger.warning(
                "Approximation error %.4e exceeds eps_max %.4e (agent %i, iteration %i)",
                measured,
                eps_max,
                j,
                k,
            )
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
