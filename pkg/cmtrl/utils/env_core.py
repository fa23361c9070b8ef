import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from cmtrl.resources.resource_utils import (
    ACTION_DELTAS,
    ACTIONS,
    DataException,
    PROB_TOL,
)


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("env_core_utils")
logger.setLevel(logging.INFO)

Cell = Tuple[int, int]


@dataclass(frozen=True)
class Bridge:
    """Set of river-crossing cells with a per-task reward for entering any of them."""

    cells: Tuple[Cell, ...]
    rewards: Tuple[float, ...]


@dataclass(frozen=True)
class MazeSpec:
    """
    Deterministic GridWorld layout shared by all tasks.

    Bridges are numbered from 1 in the order given.
    """

    rows: int
    cols: int
    walls: Tuple[Cell, ...]
    bridges: Tuple[Bridge, ...]
    start: Cell
    goal: Cell
    goal_bonus: Tuple[float, ...]
    move_reward: Tuple[float, ...]

    @property
    def n_tasks(self) -> int:
        return len(self.goal_bonus)

    def open_cells(self) -> List[Cell]:
        """Return non-wall cells in row-major order; the i-th cell is state i."""
        walls = set(self.walls)
        return [
            (r, c)
            for r in range(self.rows)
            for c in range(self.cols)
            if (r, c) not in walls
        ]

    def state_index(self) -> Dict[Cell, int]:
        """Return mapping from open cell to state index."""
        return {cell: s for s, cell in enumerate(self.open_cells())}

    def bridge_of(self) -> Dict[Cell, int]:
        """Return mapping from bridge cell to (1-based) bridge number."""
        return {
            cell: b
            for b, bridge in enumerate(self.bridges, start=1)
            for cell in bridge.cells
        }


@dataclass(frozen=True, eq=False)
class MultiTaskProblem:
    """
    Shared-dynamics multi-task CMDP.

    `transition[s, a, s']` is P(s'|s,a) and `rewards[i, s, a]` is r_i(s,a).
    Infinite bounds are stored as -inf/+inf and pin the matching dual variable to 0.
    """

    transition: np.ndarray
    rewards: np.ndarray
    gamma: float
    rho: np.ndarray
    lower_bounds: np.ndarray
    upper_bounds: np.ndarray
    slater_margin: float = 1.0
    maze: Optional[MazeSpec] = field(default=None, compare=False)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.rewards.shape[0]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.rewards)))

    @property
    def transition_rows(self) -> np.ndarray:
        """Return P as a (|S||A|) x |S| matrix with row index s * |A| + a."""
        return self.transition.reshape(self.n_states * self.n_actions, self.n_states)


def validate(problem: MultiTaskProblem) -> List[str]:
    """
    Check every MultiTaskProblem invariant and report all violations.

    Task, state and action indices in the messages are 0-based.

    :param MultiTaskProblem problem: Problem to check.
    :return: List of violation messages; empty when the problem is well formed.
    """
    violations = []
    P = problem.transition
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        return [f"transition has shape {P.shape}, expected (|S|, |A|, |S|)"]
    if problem.rewards.shape[1:] != P.shape[:2]:
        violations.append(
            f"rewards have shape {problem.rewards.shape}, expected (N, {P.shape[0]}, {P.shape[1]})"
        )

    row_sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(row_sums - 1.0) > PROB_TOL)):
        violations.append(
            f"transition row (s={s}, a={a}) sums to {row_sums[s, a]:.17g}, not 1"
        )
    for s, a in sorted({(s, a) for s, a, _ in zip(*np.nonzero(P < 0))}):
        violations.append(f"transition row (s={s}, a={a}) has negative entries")

    rho = problem.rho
    if rho.shape != (P.shape[0],):
        violations.append(f"rho has shape {rho.shape}, expected ({P.shape[0]},)")
    else:
        if abs(rho.sum() - 1.0) > PROB_TOL:
            violations.append(f"rho sums to {rho.sum():.17g}, not 1")
        if np.any(rho < 0):
            violations.append("rho has negative entries")

    if not 0.0 < problem.gamma < 1.0:
        violations.append(f"gamma = {problem.gamma} outside (0, 1)")
    if not 0.0 < problem.slater_margin <= 1.0:
        violations.append(f"slater margin = {problem.slater_margin} outside (0, 1]")

    n_tasks = problem.rewards.shape[0]
    if problem.lower_bounds.shape != (n_tasks,) or problem.upper_bounds.shape != (
        n_tasks,
    ):
        violations.append(f"bounds must have one entry per task ({n_tasks})")
    else:
        for i in range(n_tasks):
            if not problem.lower_bounds[i] < problem.upper_bounds[i]:
                violations.append(f"bounds not strictly ordered, task {i}")
            if problem.lower_bounds[i] == np.inf or problem.upper_bounds[i] == -np.inf:
                violations.append(f"bounds point the wrong way, task {i}")
    if not np.all(np.isfinite(problem.rewards)):
        violations.append("rewards contain non-finite entries")
    return violations


def validate_maze_spec(spec: MazeSpec) -> None:
    """
    Raise if a MazeSpec is inconsistent.

    :param MazeSpec spec: Maze layout.
    :return: None; raises DataException naming the offending cell.
    """
    if spec.rows < 1 or spec.cols < 1:
        raise DataException(f"Maze grid {spec.rows}x{spec.cols} is empty!")

    walls = set(spec.walls)

    def _check_cell(cell: Cell, name: str) -> None:
        r, c = cell
        if not (0 <= r < spec.rows and 0 <= c < spec.cols):
            raise DataException(f"{name} cell {cell} lies outside the grid!")
        if cell in walls:
            raise DataException(f"{name} cell {cell} is a wall!")

    for wall in spec.walls:
        r, c = wall
        if not (0 <= r < spec.rows and 0 <= c < spec.cols):
            raise DataException(f"Wall cell {wall} lies outside the grid!")
    _check_cell(spec.start, "Start")
    _check_cell(spec.goal, "Goal")
    for b, bridge in enumerate(spec.bridges, start=1):
        if len(bridge.rewards) != spec.n_tasks:
            raise DataException(
                f"Bridge {b} has {len(bridge.rewards)} rewards, expected {spec.n_tasks}!"
            )
        for cell in bridge.cells:
            _check_cell(cell, f"Bridge {b}")
            if cell == spec.goal:
                raise DataException(f"Bridge {b} cell {cell} is the goal!")
    if len(spec.move_reward) != spec.n_tasks:
        raise DataException(
            f"{len(spec.move_reward)} move rewards given for {spec.n_tasks} tasks!"
        )


def build_gridworld(
    spec: MazeSpec,
    gamma: float,
    rho: Optional[np.ndarray] = None,
    bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
    xi: float = 1.0,
) -> MultiTaskProblem:
    """
    Build the multi-task CMDP of a deterministic GridWorld.

    Rewards are paid for the cell a move enters: the goal bonus when entering the goal,
    the bridge reward when entering a bridge cell, and the move reward otherwise (moves
    into walls or the border keep the agent in place and pay the move reward).
    The goal is absorbing with zero reward.

    :param MazeSpec spec: Maze layout and per-task rewards.
    :param float gamma: Discount factor.
    :param Optional[np.ndarray] rho: Initial distribution over states. Default is a point mass on the start cell.
    :param Optional[Tuple] bounds: (lower, upper) per-task bounds. Default is (-inf, +inf) for every task.
    :param float xi: Configured Slater margin.
    :return: MultiTaskProblem with `maze` set to `spec`.
    """
    validate_maze_spec(spec)
    cells = spec.open_cells()
    index = spec.state_index()
    bridge_of = spec.bridge_of()
    n_states, n_actions, n_tasks = len(cells), len(ACTIONS), spec.n_tasks
    goal_state = index[spec.goal]

    transition = np.zeros((n_states, n_actions, n_states))
    rewards = np.zeros((n_tasks, n_states, n_actions))
    move = np.asarray(spec.move_reward, dtype=float)
    bonus = np.asarray(spec.goal_bonus, dtype=float)
    for s, (r, c) in enumerate(cells):
        for a, name in enumerate(ACTIONS):
            if s == goal_state:
                transition[s, a, s] = 1.0
                continue
            dr, dc = ACTION_DELTAS[name]
            target = (r + dr, c + dc)
            if target not in index:
                target = (r, c)
            transition[s, a, index[target]] = 1.0
            if target == (r, c):
                rewards[:, s, a] = move
            elif target == spec.goal:
                rewards[:, s, a] = bonus
            elif target in bridge_of:
                rewards[:, s, a] = spec.bridges[bridge_of[target] - 1].rewards
            else:
                rewards[:, s, a] = move

    if rho is None:
        rho = np.zeros(n_states)
        rho[index[spec.start]] = 1.0
    if bounds is None:
        bounds = ([-np.inf] * n_tasks, [np.inf] * n_tasks)
    problem = MultiTaskProblem(
        transition=transition,
        rewards=rewards,
        gamma=gamma,
        rho=np.asarray(rho, dtype=float),
        lower_bounds=np.asarray(bounds[0], dtype=float),
        upper_bounds=np.asarray(bounds[1], dtype=float),
        slater_margin=xi,
        maze=spec,
    )
    violations = validate(problem)
    if violations:
        raise DataException(f"GridWorld failed validation: {violations}!")
    logger.info(
        "Built %ix%i GridWorld with %i states and %i tasks",
        spec.rows,
        spec.cols,
        n_states,
        n_tasks,
    )
    return problem


def with_bounds(
    problem: MultiTaskProblem,
    lower: Optional[Sequence[float]] = None,
    upper: Optional[Sequence[float]] = None,
    xi: Optional[float] = None,
) -> MultiTaskProblem:
    """
    Return a copy of `problem` with replaced bounds and/or Slater margin.

    :param MultiTaskProblem problem: Source problem.
    :param Optional[Sequence[float]] lower: New lower bounds. Default keeps the current ones.
    :param Optional[Sequence[float]] upper: New upper bounds. Default keeps the current ones.
    :param Optional[float] xi: New Slater margin. Default keeps the current one.
    :return: New MultiTaskProblem.
    """
    return replace(
        problem,
        lower_bounds=problem.lower_bounds
        if lower is None
        else np.asarray(lower, dtype=float),
        upper_bounds=problem.upper_bounds
        if upper is None
        else np.asarray(upper, dtype=float),
        slater_margin=problem.slater_margin if xi is None else xi,
    )


def random_problem(
    n_states: int,
    n_actions: int,
    n_tasks: int,
    gamma: float,
    seed: int,
    lower: Optional[Sequence[float]] = None,
    upper: Optional[Sequence[float]] = None,
    xi: float = 1.0,
) -> MultiTaskProblem:
    """
    Draw a dense random CMDP: Dirichlet(1) transition rows and initial distribution, U[0,1] rewards.

    :param int n_states: Number of states.
    :param int n_actions: Number of actions.
    :param int n_tasks: Number of tasks.
    :param float gamma: Discount factor.
    :param int seed: Seed of the generator.
    :param Optional[Sequence[float]] lower: Lower bounds. Default is -inf.
    :param Optional[Sequence[float]] upper: Upper bounds. Default is +inf.
    :param float xi: Configured Slater margin.
    :return: MultiTaskProblem.
    """
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rewards = rng.uniform(0.0, 1.0, size=(n_tasks, n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return MultiTaskProblem(
        transition=transition,
        rewards=rewards,
        gamma=gamma,
        rho=rho,
        lower_bounds=np.full(n_tasks, -np.inf)
        if lower is None
        else np.asarray(lower, dtype=float),
        upper_bounds=np.full(n_tasks, np.inf)
        if upper is None
        else np.asarray(upper, dtype=float),
        slater_margin=xi,
    )


######################################################################
## Maze geometry helpers
######################################################################
def state_to_cell(spec: MazeSpec, state: int) -> Cell:
    """Return the grid cell of a state index."""
    return spec.open_cells()[state]


def cell_to_state(spec: MazeSpec, cell: Cell) -> int:
    """Return the state index of an open grid cell."""
    index = spec.state_index()
    if tuple(cell) not in index:
        raise DataException(f"Cell {tuple(cell)} is not an open maze cell!")
    return index[tuple(cell)]


def crossed_bridges(spec: MazeSpec, path: Sequence[int]) -> List[int]:
    """
    Return the (1-based) numbers of the bridges a state path enters, in order.

    Consecutive visits of the same bridge count once.

    :param MazeSpec spec: Maze layout.
    :param Sequence[int] path: State indices visited.
    :return: List of bridge numbers.
    """
    cells = spec.open_cells()
    bridge_of = spec.bridge_of()
    crossed = []
    for s in path:
        b = bridge_of.get(cells[s])
        if b is not None and (not crossed or crossed[-1] != b):
            crossed.append(b)
    return crossed


def maze_graph(spec: MazeSpec) -> nx.Graph:
    """Return the undirected 4-neighbour graph of the open maze cells."""
    open_cells = set(spec.open_cells())
    graph = nx.grid_2d_graph(spec.rows, spec.cols)
    graph.remove_nodes_from([n for n in list(graph.nodes) if n not in open_cells])
    return graph


def bridge_policy(problem: MultiTaskProblem, bridge: int) -> np.ndarray:
    """
    Return the deterministic shortest-path policy from start to goal through one bridge.

    States off the chosen route follow a shortest path to the goal that avoids all
    other bridges when possible.

    :param MultiTaskProblem problem: GridWorld built by `build_gridworld`.
    :param int bridge: 1-based bridge number.
    :return: |S| x |A| deterministic PolicyTable.
    """
    spec = problem.maze
    if spec is None:
        raise DataException("Bridge policies need a GridWorld problem!")
    if not 1 <= bridge <= len(spec.bridges):
        raise DataException(f"Bridge {bridge} does not exist!")

    graph = maze_graph(spec)
    others = [
        cell
        for b, br in enumerate(spec.bridges, start=1)
        if b != bridge
        for cell in br.cells
    ]
    routed = graph.copy()
    routed.remove_nodes_from(others)
    crossing = spec.bridges[bridge - 1].cells[0]
    try:
        route = nx.shortest_path(routed, spec.start, crossing)
        route += nx.shortest_path(routed, crossing, spec.goal)[1:]
    except nx.NetworkXNoPath as e:
        raise DataException(f"No route from start to goal through bridge {bridge}!") from e

    # Fallback moves toward the goal for every other cell.
    next_hop = {}
    for cell, path in nx.single_source_shortest_path(graph, spec.goal).items():
        if len(path) > 1:
            next_hop[cell] = path[-2]
    for cell, nxt in zip(route[:-1], route[1:]):
        next_hop[cell] = nxt

    deltas = [ACTION_DELTAS[name] for name in ACTIONS]
    policy = np.zeros((problem.n_states, problem.n_actions))
    for s, (r, c) in enumerate(spec.open_cells()):
        target = next_hop.get((r, c))
        action = 0
        if target is not None:
            action = deltas.index((target[0] - r, target[1] - c))
        policy[s, action] = 1.0
    return policy


######################################################################
## JSON documents
######################################################################
def _bound_list(values: Optional[Sequence], n_tasks: int, default: float) -> np.ndarray:
    if values is None:
        return np.full(n_tasks, default)
    if len(values) != n_tasks:
        raise DataException(f"Expected {n_tasks} bounds, got {len(values)}!")
    return np.asarray([default if v is None else float(v) for v in values])


def _bound_json(values: np.ndarray) -> List[Optional[float]]:
    return [None if np.isinf(v) else float(v) for v in values]


def maze_spec_from_json(doc: Dict) -> MazeSpec:
    """
    Parse a MazeSpec from its JSON document.

    :param Dict doc: Document with keys `grid`, `walls`, `bridges`, `start`, `goal`, `goal_bonus`, `move_reward`.
    :return: MazeSpec.
    """
    try:
        rows, cols = doc["grid"]
        return MazeSpec(
            rows=int(rows),
            cols=int(cols),
            walls=tuple(tuple(w) for w in doc.get("walls", [])),
            bridges=tuple(
                Bridge(
                    cells=tuple(tuple(c) for c in b["cells"]),
                    rewards=tuple(float(x) for x in b["rewards"]),
                )
                for b in doc.get("bridges", [])
            ),
            start=tuple(doc["start"]),
            goal=tuple(doc["goal"]),
            goal_bonus=tuple(float(x) for x in doc["goal_bonus"]),
            move_reward=tuple(float(x) for x in doc["move_reward"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataException(f"Malformed maze document: {e!r}!") from e


def maze_spec_to_json(spec: MazeSpec) -> Dict:
    """Return the JSON document of a MazeSpec."""
    return {
        "grid": [spec.rows, spec.cols],
        "walls": [list(w) for w in spec.walls],
        "bridges": [
            {"cells": [list(c) for c in b.cells], "rewards": list(b.rewards)}
            for b in spec.bridges
        ],
        "start": list(spec.start),
        "goal": list(spec.goal),
        "goal_bonus": list(spec.goal_bonus),
        "move_reward": list(spec.move_reward),
    }


def problem_from_json(doc: Dict) -> MultiTaskProblem:
    """
    Parse a MultiTaskProblem from a JSON document.

    Maze documents carry the MazeSpec keys; tabular documents carry `transition`
    (|S| x |A| x |S|) and `rewards` (N x |S| x |A|). Both take `gamma`, `rho`, `lower`,
    `upper` and `xi`, with null bounds meaning infinite.

    :param Dict doc: Problem document.
    :return: MultiTaskProblem.
    """
    if "grid" in doc:
        spec = maze_spec_from_json(doc)
        rho = doc.get("rho")
        return build_gridworld(
            spec,
            gamma=float(doc["gamma"]),
            rho=None if rho is None else np.asarray(rho, dtype=float),
            bounds=(
                _bound_list(doc.get("lower"), spec.n_tasks, -np.inf),
                _bound_list(doc.get("upper"), spec.n_tasks, np.inf),
            ),
            xi=float(doc.get("xi", 1.0)),
        )
    try:
        transition = np.asarray(doc["transition"], dtype=float)
        rewards = np.asarray(doc["rewards"], dtype=float)
        n_tasks = rewards.shape[0]
        problem = MultiTaskProblem(
            transition=transition,
            rewards=rewards,
            gamma=float(doc["gamma"]),
            rho=np.asarray(doc["rho"], dtype=float),
            lower_bounds=_bound_list(doc.get("lower"), n_tasks, -np.inf),
            upper_bounds=_bound_list(doc.get("upper"), n_tasks, np.inf),
            slater_margin=float(doc.get("xi", 1.0)),
        )
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise DataException(f"Malformed problem document: {e!r}!") from e
    violations = validate(problem)
    if violations:
        raise DataException(f"Problem failed validation: {violations}!")
    return problem


def problem_to_json(problem: MultiTaskProblem) -> Dict:
    """Return the JSON document of a problem (maze form when it was built from a MazeSpec)."""
    doc = {
        "gamma": problem.gamma,
        "rho": problem.rho.tolist(),
        "lower": _bound_json(problem.lower_bounds),
        "upper": _bound_json(problem.upper_bounds),
        "xi": problem.slater_margin,
    }
    if problem.maze is not None:
        doc.update(maze_spec_to_json(problem.maze))
    else:
        doc["transition"] = problem.transition.tolist()
        doc["rewards"] = problem.rewards.tolist()
    return doc
