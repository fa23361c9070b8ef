import math

import networkx as nx
import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from cmtrl.resources.resource_utils import ConfigException, DataException
from cmtrl.utils.consensus_net import (
    CommGraph,
    averaging_matrix,
    check_weight_matrix,
    consensus_error,
    consensus_step,
    graph_from_config,
    lazy_metropolis,
    preset_graph,
    second_singular_value,
    weight_matrix_to_csv,
)


def ring_sigma2(n):
    """Second largest |eigenvalue| of lazy Metropolis weights on an n-cycle (all degrees 2)."""
    eigenvalues = [0.5 + 0.5 * (1.0 / 3.0 + (2.0 / 3.0) * math.cos(2 * math.pi * k / n)) for k in range(1, n)]
    return max(abs(e) for e in eigenvalues)


@pytest.mark.parametrize("preset", ["complete", "ring", "path", "star"])
def test_presets_give_doubly_stochastic_weights(preset):
    graph = preset_graph(preset, 6)
    weights = lazy_metropolis(graph)
    check_weight_matrix(weights.W, graph)
    assert_allclose(weights.W, weights.W.T)
    assert 0.0 <= weights.sigma2 < 1.0


def test_ring_weights():
    weights = lazy_metropolis(preset_graph("ring", 5))
    assert weights.W[0, 0] == pytest.approx(2.0 / 3.0)
    assert weights.W[0, 1] == pytest.approx(1.0 / 6.0)
    assert weights.W[0, 2] == 0.0
    assert weights.sigma2 == pytest.approx(ring_sigma2(5))


def test_power_iteration_on_large_ring():
    weights = lazy_metropolis(preset_graph("ring", 70))
    assert weights.sigma2 == pytest.approx(ring_sigma2(70), rel=1e-6)
    assert weights.spectral_gap == pytest.approx(1.0 - ring_sigma2(70), rel=1e-4)


def test_single_node_and_averaging():
    assert lazy_metropolis(preset_graph("complete", 1)).sigma2 == 0.0
    averaging = averaging_matrix(4)
    assert averaging.sigma2 == 0.0
    assert second_singular_value(averaging.W) == pytest.approx(0.0, abs=1e-12)


def test_disconnected_graph_rejected():
    graph = CommGraph.from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(DataException, match="disconnected"):
        lazy_metropolis(graph)


def test_edge_validation():
    with pytest.raises(DataException):
        CommGraph.from_edges(3, [(0, 0)])
    with pytest.raises(DataException):
        CommGraph.from_edges(3, [(0, 3)])
    assert CommGraph.from_edges(3, [(1, 0), (0, 1), (2, 1)]).edges == ((0, 1), (1, 2))


def test_networkx_round_trip():
    graph = CommGraph.from_networkx(nx.star_graph(3))
    assert graph.n_nodes == 4
    assert nx.is_isomorphic(graph.to_networkx(), nx.star_graph(3))


def test_consensus_step_preserves_mean_and_contracts():
    weights = lazy_metropolis(preset_graph("path", 4))
    thetas = np.random.default_rng(0).standard_normal((4, 6))
    mixed = consensus_step(thetas, weights)
    assert_allclose(mixed.mean(axis=0), thetas.mean(axis=0))
    assert consensus_error(mixed) <= weights.sigma2 * consensus_error(thetas) * math.sqrt(4) + 1e-12
    for _ in range(500):
        mixed = consensus_step(mixed, weights)
    assert consensus_error(mixed) < 1e-10


def test_consensus_step_shape_mismatch():
    with pytest.raises(DataException):
        consensus_step(np.zeros((3, 2)), averaging_matrix(4))


def test_consensus_error_of_tables():
    thetas = np.zeros((2, 2, 2))
    thetas[0, 0, 0] = 2.0
    assert consensus_error(thetas) == pytest.approx(1.0)


def test_graph_from_config():
    weights = graph_from_config({"preset": "ring", "n": 3}, 3)
    assert weights.n_agents == 3
    weights = graph_from_config({"preset": "complete"}, 4)
    assert weights.n_agents == 4
    weights = graph_from_config({"preset": "complete", "n": 3, "weights": "averaging"})
    assert_allclose(weights.W, np.full((3, 3), 1.0 / 3.0))
    weights = graph_from_config({"edges": [[0, 1], [1, 2]]})
    assert weights.n_agents == 3


@pytest.mark.parametrize(
    "cfg, n, pointer",
    [
        ({"preset": "torus", "n": 3}, None, "/graph/preset"),
        ({"preset": "ring", "n": 4}, 3, "/graph/n"),
        ({"preset": "ring", "n": 4, "weights": "averaging"}, None, "/graph/weights"),
        ({"preset": "ring", "n": 3, "colour": "red"}, None, "/graph/colour"),
        ({"edges": [[0, 1], [2, 3]]}, None, "/graph"),
        ({}, None, "/graph"),
    ],
)
def test_graph_from_config_errors(cfg, n, pointer):
    with pytest.raises(ConfigException) as e:
        graph_from_config(cfg, n)
    assert e.value.pointer == pointer


def test_weight_matrix_to_csv(tmp_path):
    weights = lazy_metropolis(preset_graph("star", 4))
    path = tmp_path / "w.csv"
    weight_matrix_to_csv(weights, str(path))
    assert_allclose(pd.read_csv(path, header=None).to_numpy(), weights.W, rtol=0, atol=0)
