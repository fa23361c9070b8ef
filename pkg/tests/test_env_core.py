from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cmtrl.resources.mazes import FEASIBLE_BRIDGE, UNCONSTRAINED_BRIDGE
from cmtrl.resources.resource_utils import DataException
from cmtrl.utils.env_core import (
    MazeSpec,
    build_gridworld,
    bridge_policy,
    cell_to_state,
    crossed_bridges,
    maze_spec_from_json,
    problem_from_json,
    problem_to_json,
    random_problem,
    state_to_cell,
    validate,
    with_bounds,
)
from cmtrl.utils.exact_eval import greedy_rollout, task_values

from tests.conftest import bandit


def route_value(n_moves, bridge_step, move, bridge, bonus, gamma=0.99):
    """Discounted return of a route that enters its bridge at `bridge_step` and the goal on its last move."""
    value = 0.0
    for t in range(n_moves):
        if t == n_moves - 1:
            value += gamma ** t * bonus
        elif t == bridge_step:
            value += gamma ** t * bridge
        else:
            value += gamma ** t * move
    return value


# (moves, bridge step) of the shortest route through each bridge
ROUTES = {1: (9, 4), 2: (13, 6), 3: (17, 8), 4: (21, 10)}


def test_three_mazes_layout(three_mazes):
    spec = three_mazes.maze
    assert three_mazes.n_states == 94
    assert three_mazes.n_actions == 4
    assert three_mazes.n_tasks == 3
    assert validate(three_mazes) == []
    assert spec.bridge_of() == {(0, 5): 1, (2, 5): 2, (4, 5): 3, (6, 5): 4}
    assert three_mazes.rho[cell_to_state(spec, (0, 0))] == 1.0


def test_goal_is_absorbing_with_zero_reward(three_mazes):
    goal = cell_to_state(three_mazes.maze, three_mazes.maze.goal)
    assert_allclose(three_mazes.transition[goal, :, goal], 1.0)
    assert_allclose(three_mazes.rewards[:, goal, :], 0.0)


def test_wall_bump_pays_move_reward(three_mazes):
    spec = three_mazes.maze
    s = cell_to_state(spec, (1, 4))
    right = 3
    assert three_mazes.transition[s, right, s] == 1.0
    assert_allclose(three_mazes.rewards[:, s, right], spec.move_reward)


@pytest.mark.parametrize("bridge", [1, 2, 3, 4])
def test_bridge_policy_values_match_hand_routes(three_mazes, bridge):
    spec = three_mazes.maze
    moves, step = ROUTES[bridge]
    expected = [
        route_value(moves, step, spec.move_reward[i], spec.bridges[bridge - 1].rewards[i], spec.goal_bonus[i])
        for i in range(3)
    ]
    policy = bridge_policy(three_mazes, bridge)
    assert_allclose(task_values(three_mazes, policy), expected, rtol=1e-10)

    rollout = greedy_rollout(three_mazes, policy, 200)
    assert rollout.reached_goal
    assert crossed_bridges(spec, rollout.path) == [bridge]


def test_only_bridge_four_is_feasible(three_mazes):
    feasible = []
    averages = {}
    for bridge in range(1, 5):
        values = task_values(three_mazes, bridge_policy(three_mazes, bridge))
        averages[bridge] = values.mean()
        if np.all(values >= three_mazes.lower_bounds):
            feasible.append(bridge)
    assert feasible == [FEASIBLE_BRIDGE]
    assert max(averages, key=averages.get) == UNCONSTRAINED_BRIDGE


def test_corridor_uniform_policy(corridor_spec):
    problem = build_gridworld(corridor_spec, gamma=0.9)
    uniform = np.full((2, 4), 0.25)
    start = cell_to_state(corridor_spec, (0, 0))
    assert_allclose(task_values(problem, uniform), [7.0 / 13.0])
    assert problem.rho[start] == 1.0


def test_single_cell_maze_has_zero_value():
    spec = maze_spec_from_json(
        {
            "grid": [1, 1],
            "start": [0, 0],
            "goal": [0, 0],
            "goal_bonus": [1.0, 2.0],
            "move_reward": [-0.1, -0.2],
        }
    )
    problem = build_gridworld(spec, gamma=0.9)
    assert problem.n_states == 1
    assert_allclose(task_values(problem, np.full((1, 4), 0.25)), [0.0, 0.0])


def test_bad_maze_spec_names_cell():
    spec = MazeSpec(
        rows=2,
        cols=2,
        walls=((0, 1),),
        bridges=(),
        start=(0, 0),
        goal=(0, 1),
        goal_bonus=(1.0,),
        move_reward=(-0.1,),
    )
    with pytest.raises(DataException, match=r"\(0, 1\)"):
        build_gridworld(spec, gamma=0.9)


def test_validate_reports_every_violation():
    problem = bandit([[0.2, 0.7]], gamma=0.5, lower=[1.0], upper=[0.5])
    problem.transition[0, 1, 0] = 0.9
    violations = validate(problem)
    assert any("s=0, a=1" in v for v in violations)
    assert any("bounds not strictly ordered, task 0" in v for v in violations)


def test_validate_rejects_gamma_one(unconstrained_bandit):
    assert any("gamma" in v for v in validate(replace(unconstrained_bandit, gamma=1.0)))


def test_random_problem_is_valid_and_seeded():
    first = random_problem(5, 3, 2, gamma=0.8, seed=11)
    second = random_problem(5, 3, 2, gamma=0.8, seed=11)
    assert validate(first) == []
    assert_allclose(first.transition, second.transition)
    assert_allclose(first.rewards, second.rewards)
    assert 0.0 <= first.rewards.min() and first.rewards.max() <= 1.0


def test_with_bounds_keeps_dynamics(tiny_problem):
    bounded = with_bounds(tiny_problem, lower=[0.1, -np.inf], xi=0.5)
    assert bounded.slater_margin == 0.5
    assert_allclose(bounded.lower_bounds, [0.1, -np.inf])
    assert bounded.transition is tiny_problem.transition


def test_cell_state_mapping(three_mazes):
    spec = three_mazes.maze
    for s in (0, 17, 93):
        assert cell_to_state(spec, state_to_cell(spec, s)) == s
    with pytest.raises(DataException):
        cell_to_state(spec, (1, 5))


def test_crossed_bridges_counts_consecutive_visits_once(three_mazes):
    spec = three_mazes.maze
    path = [cell_to_state(spec, c) for c in [(0, 4), (0, 5), (0, 5), (0, 6), (0, 5)]]
    assert crossed_bridges(spec, path) == [1, 1]
    assert crossed_bridges(spec, [cell_to_state(spec, (0, 4))]) == []


def test_problem_json_infinite_bounds(three_mazes):
    doc = problem_to_json(with_bounds(three_mazes, lower=[5.0, -np.inf, 500.0]))
    assert doc["lower"] == [5.0, None, 500.0]
    assert doc["upper"] == [None, None, None]
    restored = problem_from_json(doc)
    assert_allclose(restored.rewards, three_mazes.rewards)
    assert np.isneginf(restored.lower_bounds[1])


def test_malformed_tabular_document():
    with pytest.raises(DataException):
        problem_from_json({"transition": [[[1.0]]], "gamma": 0.5})
