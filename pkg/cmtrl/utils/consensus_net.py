import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

from cmtrl.resources.basics import FLOAT_FORMAT
from cmtrl.resources.resource_utils import (
    ConfigException,
    DataException,
    DOUBLY_STOCHASTIC_TOL,
    POWER_ITERATION_TOL,
    SIGMA2_DISCONNECTED_TOL,
    SVD_MAX_NODES,
)


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("consensus_net_utils")
logger.setLevel(logging.INFO)

GRAPH_PRESETS = {
    "complete": nx.complete_graph,
    "ring": nx.cycle_graph,
    "path": nx.path_graph,
    "star": lambda n: nx.star_graph(n - 1),
}
"""
networkx generators of the preset communication graphs, keyed by preset name.
"""


@dataclass(frozen=True)
class CommGraph:
    """Undirected communication graph; edges are stored once as (i, j) with i < j."""

    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[Tuple[int, int]]) -> "CommGraph":
        """
        Build a CommGraph from an edge list, dropping duplicates.

        :param int n_nodes: Number of nodes.
        :param Iterable edges: Pairs of node indices.
        :return: CommGraph.
        """
        normalized = set()
        for i, j in edges:
            if i == j:
                raise DataException(f"Self-loop on node {i} is not allowed!")
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise DataException(f"Edge ({i}, {j}) references a missing node!")
            normalized.add((min(i, j), max(i, j)))
        return cls(n_nodes=n_nodes, edges=tuple(sorted(normalized)))

    @classmethod
    def from_networkx(cls, graph: nx.Graph) -> "CommGraph":
        return cls.from_edges(graph.number_of_nodes(), graph.edges)

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_edges_from(self.edges)
        return graph


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Doubly stochastic consensus matrix with its cached second singular value."""

    W: np.ndarray
    sigma2: float

    @property
    def n_agents(self) -> int:
        return self.W.shape[0]

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.sigma2


def preset_graph(preset: str, n: int) -> CommGraph:
    """
    Return a preset communication graph.

    :param str preset: One of 'complete', 'ring', 'path', 'star'.
    :param int n: Number of nodes.
    :return: CommGraph.
    """
    if preset not in GRAPH_PRESETS:
        raise DataException(
            f"Unknown graph preset {preset}; expected one of {sorted(GRAPH_PRESETS)}!"
        )
    if n < 1:
        raise DataException("A graph needs at least one node!")
    return CommGraph.from_networkx(GRAPH_PRESETS[preset](n))


def check_weight_matrix(W: np.ndarray, graph: Optional[CommGraph] = None) -> None:
    """
    Raise if `W` is not doubly stochastic (and, given a graph, not supported on its edges).

    :param np.ndarray W: Candidate weight matrix.
    :param Optional[CommGraph] graph: Graph whose sparsity W must follow.
    :return: None.
    """
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DataException(f"Weight matrix has shape {W.shape}, expected square!")
    if np.any(W < 0):
        raise DataException("Weight matrix has negative entries!")
    if np.any(np.abs(W.sum(axis=0) - 1.0) > DOUBLY_STOCHASTIC_TOL) or np.any(
        np.abs(W.sum(axis=1) - 1.0) > DOUBLY_STOCHASTIC_TOL
    ):
        raise DataException("Weight matrix is not doubly stochastic!")
    if graph is not None:
        support = np.eye(graph.n_nodes, dtype=bool)
        for i, j in graph.edges:
            support[i, j] = support[j, i] = True
        if np.any((W > 0) != support):
            raise DataException("Weight matrix support does not match the graph!")


def lazy_metropolis(graph: CommGraph) -> WeightMatrix:
    """
    Return the lazy Metropolis weights W = I/2 + M/2 of a connected graph.

    M_ij = 1 / (1 + max(deg_i, deg_j)) on edges and M_ii = 1 - sum_{j != i} M_ij.

    :param CommGraph graph: Connected communication graph.
    :return: WeightMatrix with cached sigma2.
    """
    nx_graph = graph.to_networkx()
    if not nx.is_connected(nx_graph):
        raise DataException(
            f"Communication graph with {graph.n_nodes} nodes is disconnected!"
        )
    degree = dict(nx_graph.degree)
    M = np.zeros((graph.n_nodes, graph.n_nodes))
    for i, j in graph.edges:
        M[i, j] = M[j, i] = 1.0 / (1.0 + max(degree[i], degree[j]))
    M[np.diag_indices_from(M)] = 1.0 - M.sum(axis=1)
    W = 0.5 * np.eye(graph.n_nodes) + 0.5 * M
    check_weight_matrix(W, graph)
    return WeightMatrix(W=W, sigma2=second_singular_value(W))


def averaging_matrix(n: int) -> WeightMatrix:
    """Return the complete-averaging matrix (1/N) 11^T, whose sigma2 is 0."""
    return WeightMatrix(W=np.full((n, n), 1.0 / n), sigma2=0.0)


def second_singular_value(W: np.ndarray) -> float:
    """
    Return the second largest singular value of a doubly stochastic matrix.

    Full SVD for N <= 64; otherwise power iteration on B = W - (1/N)11^T, whose largest
    singular value equals sigma2(W). By convention sigma2 = 0 for N = 1.

    :param np.ndarray W: Doubly stochastic matrix.
    :return: sigma2 in [0, 1).
    """
    n = W.shape[0]
    if n == 1:
        return 0.0
    if n <= SVD_MAX_NODES:
        sigma2 = float(np.linalg.svd(W, compute_uv=False)[1])
    else:
        B = W - np.full((n, n), 1.0 / n)
        x = np.random.default_rng(0).standard_normal(n)
        x -= x.mean()
        x /= np.linalg.norm(x)
        sigma2 = 0.0
        for _ in range(100_000):
            y = B.T @ (B @ x)
            norm = np.linalg.norm(y)
            if norm == 0.0:
                sigma2 = 0.0
                break
            estimate = np.sqrt(norm)
            x = y / norm
            if abs(estimate - sigma2) <= POWER_ITERATION_TOL * estimate:
                sigma2 = estimate
                break
            sigma2 = estimate
        else:
            logger.warning("Power iteration for sigma2 hit its iteration cap")
        sigma2 = float(sigma2)
    if sigma2 >= 1.0 - SIGMA2_DISCONNECTED_TOL:
        raise DataException(
            f"sigma2 = {sigma2:.15f}: graph effectively disconnected!"
        )
    return sigma2


def as_weight_matrix(graph: Union[CommGraph, WeightMatrix]) -> WeightMatrix:
    """Return lazy Metropolis weights for a graph, or a WeightMatrix unchanged."""
    if isinstance(graph, WeightMatrix):
        return graph
    return lazy_metropolis(graph)


def consensus_step(thetas: np.ndarray, W: Union[WeightMatrix, np.ndarray]) -> np.ndarray:
    """
    Apply one synchronous consensus round: row i becomes sum_j W_ij theta_j.

    :param np.ndarray thetas: N x d matrix, one row per agent.
    :param W: WeightMatrix or N x N array.
    :return: N x d matrix W @ thetas.
    """
    matrix = W.W if isinstance(W, WeightMatrix) else W
    if thetas.shape[0] != matrix.shape[1]:
        raise DataException(
            f"Consensus step got {thetas.shape[0]} agent rows for a {matrix.shape[0]}-agent weight matrix!"
        )
    return matrix @ thetas


def consensus_error(thetas: np.ndarray) -> float:
    """Return max_i ||theta_bar - theta_i||_2 over the rows of an N x d matrix."""
    flat = thetas.reshape(thetas.shape[0], -1)
    return float(np.max(np.linalg.norm(flat - flat.mean(axis=0), axis=1)))


def graph_from_config(cfg: Dict, n: Optional[int] = None) -> WeightMatrix:
    """
    Build consensus weights from a graph config entry.

    Accepted forms are `{"preset": name, "n": N}` and `{"edges": [[i, j], ...], "n": N}`;
    `"weights": "averaging"` on a complete graph selects (1/N)11^T instead of lazy
    Metropolis weights.

    :param Dict cfg: Graph config entry.
    :param Optional[int] n: Required number of agents. Default accepts any size.
    :return: WeightMatrix.
    """
    unknown = set(cfg) - {"preset", "n", "edges", "weights"}
    if unknown:
        raise ConfigException(f"/graph/{sorted(unknown)[0]}", "unknown key")
    if "edges" in cfg:
        edges = [tuple(e) for e in cfg["edges"]]
        size = cfg.get("n", 1 + max((max(e) for e in edges), default=0))
        try:
            graph = CommGraph.from_edges(int(size), edges)
        except DataException as e:
            raise ConfigException("/graph/edges", str(e)) from e
    elif "preset" in cfg:
        if cfg["preset"] not in GRAPH_PRESETS:
            raise ConfigException(
                "/graph/preset", f"expected one of {sorted(GRAPH_PRESETS)}"
            )
        size = cfg.get("n", n)
        if not isinstance(size, int) or size < 1:
            raise ConfigException("/graph/n", "expected a positive integer")
        graph = preset_graph(cfg["preset"], size)
    else:
        raise ConfigException("/graph", "expected 'preset' or 'edges'")

    if n is not None and graph.n_nodes != n:
        raise ConfigException(
            "/graph/n", f"graph has {graph.n_nodes} nodes but the problem has {n} tasks"
        )

    weights = cfg.get("weights", "lazy_metropolis")
    if weights == "averaging":
        if len(graph.edges) != graph.n_nodes * (graph.n_nodes - 1) // 2:
            raise ConfigException(
                "/graph/weights", "averaging weights need a complete graph"
            )
        return averaging_matrix(graph.n_nodes)
    if weights != "lazy_metropolis":
        raise ConfigException(
            "/graph/weights", "expected 'lazy_metropolis' or 'averaging'"
        )
    try:
        return lazy_metropolis(graph)
    except DataException as e:
        raise ConfigException("/graph", str(e)) from e


def weight_matrix_to_csv(weights: WeightMatrix, path: str) -> None:
    """Write W as a headerless CSV matrix."""
    pd.DataFrame(weights.W).to_csv(
        path, header=False, index=False, float_format=FLOAT_FORMAT
    )
