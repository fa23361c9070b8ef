"""Script containing generic run constants: trace schema, exit codes, and config keys."""
from typing import List


######################################################################
## Trace files
######################################################################
FLOAT_FORMAT = "%.17g"
"""
printf-style format for every float written to a CSV (17 significant digits).
"""

HEADER_PREFIX = "# "
"""
Prefix of `key=value` header and footer comment lines in trace CSVs.
"""

ERROR_FOOTER_KEY = "error"
"""
Key of the footer comment line written when a run aborts.
"""

TRACE_LEAD_COLUMNS = ["k", "agent"]
"""
Iteration and agent index columns; rows are strictly increasing in (k, agent).
"""

TRACE_TAIL_COLUMNS = ["v0", "violation", "consensus_error", "critic_error"]
"""
Columns after the per-task values: average value, total constraint violation,
consensus error max_i ||theta_bar - theta_i||, critic error ||Q_hat - Q^behavior||_inf.
"""

TRACE_WRITE_CHUNK = 512
"""
Number of buffered trace rows written to disk at a time.
"""


def trace_columns(n_tasks: int) -> List[str]:
    """
    Return the fixed column order of a trace CSV for `n_tasks` tasks.

    :param int n_tasks: Number of tasks (equal to the number of agents).
    :return: List of column names.
    """
    return (
        TRACE_LEAD_COLUMNS
        + [f"v_task_{i}" for i in range(n_tasks)]
        + TRACE_TAIL_COLUMNS
        + [f"lambda_{i}" for i in range(n_tasks)]
        + [f"nu_{i}" for i in range(n_tasks)]
    )


######################################################################
## Exit codes
######################################################################
EXIT_OK = 0
"""
Run (or score) completed successfully.
"""

EXIT_CONFIG_ERROR = 2
"""
Config failed validation.
"""

EXIT_NUMERICAL_FAILURE = 3
"""
A linear solve or stationary distribution failed during the run.
"""

EXIT_SCORE_FAILURE = 4
"""
A trace failed at least one acceptance predicate.
"""


######################################################################
## Configuration
######################################################################
SEED_ENV_VAR = "CMTRL_SEED"
"""
Environment variable that overrides the `seed` entry of any run config.
"""

ALGORITHMS = ["pdnpg", "pdnac", "lfa"]
"""
Algorithm ids accepted by the harness.
"""

MODES = ["central", "decentral"]
"""
Execution modes: a single server policy or one policy per agent mixed by consensus.
"""

COMMON_CONFIG_KEYS = {
    "problem",
    "graph",
    "K",
    "alpha0",
    "c_alpha",
    "eta0",
    "mode",
    "eval_every",
    "seed",
    "progress",
}
"""
Config keys accepted by every algorithm.
"""

ALGORITHM_CONFIG_KEYS = {
    "pdnpg": COMMON_CONFIG_KEYS,
    "pdnac": COMMON_CONFIG_KEYS | {"beta0", "eps0", "mu_lower"},
    "lfa": COMMON_CONFIG_KEYS
    | {"T", "beta0", "eps0", "mu_lower", "eps_max", "delta", "features", "b_omega"},
}
"""
Allowed config keys per algorithm; anything else is rejected.
"""

DEFAULT_ETA0 = 1.0
"""
Default dual step-size constant.
"""

DEFAULT_C_ALPHA = 1.0
"""
Default constant c in alpha0 = c * sqrt(1 - sigma2) / N^(1/4).
"""

DEFAULT_BETA0 = 0.5
"""
Default critic step-size constant.
"""

DEFAULT_EPS0 = 0.5
"""
Default exploration constant of the behavior policy.
"""

DEFAULT_SEED = 0
"""
Seed used when neither the config nor the environment sets one.
"""
