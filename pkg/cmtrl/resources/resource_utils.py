"""Script containing resource utility constants and exception classes."""
from typing import Dict, Tuple


ACTIONS = ["up", "down", "left", "right"]
"""
GridWorld action names, in action-index order.

Ties in greedy action selection are broken by lowest index, so `up` wins ties.
"""

ACTION_DELTAS: Dict[str, Tuple[int, int]] = {
    "up": (-1, 0),
    "down": (1, 0),
    "left": (0, -1),
    "right": (0, 1),
}
"""
(row, column) offset applied to a cell by each GridWorld action.
"""

PROB_TOL = 1e-12
"""
Tolerance on probability row sums (transition rows, policies, initial distribution).
"""

ADVANTAGE_TOL = 1e-10
"""
Tolerance on the policy-weighted advantage sum at every state.
"""

BELLMAN_RESIDUAL_TOL = 1e-9
"""
Relative tolerance on the policy evaluation residual ||(I - gamma P^pi)V - r^pi||_inf.

Scaled by max(1, R_max).
"""

STATIONARY_RESIDUAL_TOL = 1e-10
"""
Tolerance on the stationary distribution balance residual ||mu P^pi - mu||_inf.
"""

PROJECTED_BELLMAN_TOL = 1e-9
"""
Relative tolerance on the projected Bellman residual ||H omega + b||.
"""

DOUBLY_STOCHASTIC_TOL = 1e-12
"""
Tolerance on row and column sums of consensus weight matrices.
"""

SIGMA2_DISCONNECTED_TOL = 1e-12
"""
Second singular values within this distance of 1 mean the graph is effectively disconnected.
"""

POWER_ITERATION_TOL = 1e-10
"""
Relative tolerance for the power iteration estimate of the second singular value.
"""

SVD_MAX_NODES = 64
"""
Largest network size for which the second singular value is computed with a full SVD.

Larger networks use power iteration on W - (1/N)11^T.
"""

MAX_ORACLE_POLICIES = 729
"""
Maximum number of deterministic policies the tiny-instance constrained oracle enumerates.

Equal to 3^6, so every problem with |S| * |A| <= 12 (and the 5-state, 3-action benchmark) fits.
"""

MAX_ORACLE_TASKS = 3
"""
Maximum number of tasks supported by the tiny-instance constrained oracle.
"""

ORACLE_COARSE_STEPS = 40
"""
Number of steps in the coarse oracle grid over pairwise mixing weights (resolution 1/40).
"""

ORACLE_FINE_STEPS = 200
"""
Number of steps in the refined oracle grid around the incumbent (resolution 1/200).
"""

FEASIBILITY_TOL = 1e-9
"""
Slack allowed when testing a value against its bounds.
"""

APPROXIMATION_SLACK = 1e-8
"""
Slack allowed when comparing a measured approximation error against the configured eps_max.
"""


class DataException(Exception):
    """Raised when inputs violate a documented contract or cannot be processed."""


class ConfigException(DataException):
    """
    Raised when a run configuration fails validation.

    :param str pointer: JSON pointer to the offending config entry (e.g. '/graph/preset').
    :param str message: Description of the problem.
    """

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


class NumericalFailure(DataException):
    """Raised when a linear solve misses its residual tolerance or a solution is not unique."""
