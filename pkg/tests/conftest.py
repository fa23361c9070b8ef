import numpy as np
import pytest

from cmtrl.resources.mazes import THREE_MAZES_SPEC
from cmtrl.utils.env_core import (
    MultiTaskProblem,
    maze_spec_from_json,
    problem_from_json,
    random_problem,
    with_bounds,
)
from cmtrl.utils.exact_eval import bind_lower_bound, optimal_policy, task_values


def bandit(rewards, gamma=0.5, lower=None, upper=None):
    """Single-state problem with one reward row per task."""
    rewards = np.asarray(rewards, dtype=float)
    n_tasks, n_actions = rewards.shape
    return MultiTaskProblem(
        transition=np.ones((1, n_actions, 1)),
        rewards=rewards[:, None, :],
        gamma=gamma,
        rho=np.ones(1),
        lower_bounds=np.full(n_tasks, -np.inf) if lower is None else np.asarray(lower, dtype=float),
        upper_bounds=np.full(n_tasks, np.inf) if upper is None else np.asarray(upper, dtype=float),
    )


@pytest.fixture
def unconstrained_bandit():
    return bandit([[0.2, 0.7]])


@pytest.fixture
def constrained_bandit():
    """Optimum 0.8 at pi(a1) = 0.5, where the task-1 bound binds."""
    return bandit([[0.2, 0.9], [0.5, 0.0]], lower=[-np.inf, 0.5])


@pytest.fixture
def corridor_spec():
    return maze_spec_from_json(
        {
            "grid": [1, 2],
            "walls": [],
            "bridges": [],
            "start": [0, 0],
            "goal": [0, 1],
            "goal_bonus": [1.0],
            "move_reward": [-0.1],
        }
    )


@pytest.fixture
def tiny_problem():
    return random_problem(5, 3, 2, gamma=0.8, seed=7)


@pytest.fixture
def tiny_constrained_problem(tiny_problem):
    return bind_lower_bound(tiny_problem, 1, 0.5)


@pytest.fixture
def small_problem():
    return random_problem(3, 2, 2, gamma=0.5, seed=3)


@pytest.fixture(scope="session")
def three_mazes():
    return problem_from_json(
        {**THREE_MAZES_SPEC, "gamma": 0.99, "xi": 0.5, "lower": [5.0, 50.0, 500.0]}
    )


@pytest.fixture
def single_task_problem():
    """One task whose upper bound sits halfway between the uniform and optimal values."""
    problem = random_problem(5, 3, 1, gamma=0.8, seed=11)
    uniform = task_values(problem, np.full((5, 3), 1.0 / 3.0))[0]
    best = task_values(problem, optimal_policy(problem))[0]
    return with_bounds(problem, upper=[0.5 * (uniform + best)])
