"""Script containing the three-maze GridWorld benchmark and its demo run configs."""
from typing import Dict, List


######################################################################
## Three-maze benchmark
######################################################################
THREE_MAZES_SPEC: Dict = {
    "grid": [10, 10],
    "walls": [[1, 5], [3, 5], [5, 5], [7, 5], [8, 5], [9, 5]],
    "bridges": [
        {"cells": [[0, 5]], "rewards": [-0.1, -50.0, -500.0]},
        {"cells": [[2, 5]], "rewards": [-5.0, -1.0, -500.0]},
        {"cells": [[4, 5]], "rewards": [-5.0, -50.0, -10.0]},
        {"cells": [[6, 5]], "rewards": [-1.0, -10.0, -100.0]},
    ],
    "start": [0, 0],
    "goal": [0, 9],
    "goal_bonus": [10.0, 100.0, 1000.0],
    "move_reward": [-0.1, -1.0, -10.0],
}
"""
MazeSpec document shared by the three tasks.

A wall "river" runs down column 5 and can only be crossed on one of four single-cell
bridges (numbered 1-4 from the top). Every task shares the layout and dynamics but
prices the bridges, moves, and goal differently:
    - Task 0: goal 10, move -0.1, bridges (-0.1, -5, -5, -1).
    - Task 1: goal 100, move -1, bridges (-50, -1, -50, -10).
    - Task 2: goal 1000, move -10, bridges (-500, -500, -10, -100).

Bridge 3 maximizes the average value; only bridge 4 satisfies THREE_MAZES_LOWER.
"""

THREE_MAZES_GAMMA = 0.99
"""
Discount factor of the three-maze benchmark.
"""

THREE_MAZES_XI = 0.5
"""
Configured Slater margin of the three-maze benchmark (only enters B_lambda).
"""

THREE_MAZES_LOWER: List[float] = [5.0, 50.0, 500.0]
"""
Per-task lower bounds on the value from the start cell.
"""

FEASIBLE_BRIDGE = 4
"""
Bridge crossed by the constrained optimum of the three-maze benchmark.
"""

UNCONSTRAINED_BRIDGE = 3
"""
Bridge crossed by the unconstrained optimum of the three-maze benchmark.
"""


######################################################################
## Tiny random benchmark
######################################################################
TINY_CMDP_SHAPE = {"n_states": 5, "n_actions": 3, "n_tasks": 2}
"""
Shape of the random tiny benchmark with a binding constraint on task 1.
"""

TINY_CMDP_GAMMA = 0.8
"""
Discount factor of the random tiny benchmark.
"""

TINY_CMDP_BIND_FRACTION = 0.5
"""
Position of the task-1 lower bound between its value under the unconstrained optimum (0)
and its best achievable value (1).
"""


######################################################################
## Demo configs
######################################################################
MAZE_DEMO_CONFIG: Dict = {
    "problem": {"preset": "three_mazes"},
    "graph": {"preset": "ring", "n": 3},
    "K": 5000,
    "alpha0": 0.15,
    "eta0": 0.05,
    "mode": "decentral",
    "eval_every": 50,
    "seed": 0,
}
"""
Decentralized exact-gradient run on the three mazes with the constrained bounds.
"""

MAZE_DEMO_UNCONSTRAINED_PROBLEM: Dict = {
    "preset": "three_mazes",
    "lower": [None, None, None],
}
"""
Problem entry of the unconstrained demo run (all lower bounds at -infinity).
"""

MAZE_ROLLOUT_STEPS = 200
"""
Maximum number of greedy steps used to read off the bridge a maze policy crosses.
"""
