import hashlib
import json
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from cmtrl.resources.basics import (
    EXIT_CONFIG_ERROR,
    EXIT_NUMERICAL_FAILURE,
    EXIT_OK,
    SEED_ENV_VAR,
)
from cmtrl.resources.mazes import FEASIBLE_BRIDGE, UNCONSTRAINED_BRIDGE
from cmtrl.resources.resource_utils import ConfigException, DataException, NumericalFailure
from cmtrl.utils import harness
from cmtrl.utils.env_core import bridge_policy, random_problem
from cmtrl.utils.exact_eval import task_values, tiny_cmdp_oracle
from cmtrl.utils.harness import (
    DEFAULT_THRESHOLDS,
    build_problem,
    load_config,
    load_thresholds,
    maze_bridges,
    maze_demo,
    oracle_value,
    rate_sweep,
    run_experiment,
    running_average_error,
    save_thresholds,
    score_trace,
    spectrum,
    write_frame,
)
from cmtrl.utils.trace import MetricsTrace, read_trace


TINY_PDNPG = {
    "problem": {"preset": "tiny_cmdp", "seed": 7},
    "graph": {"preset": "complete", "n": 2},
    "K": 30,
    "eval_every": 5,
}


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


def hand_trace(header=None):
    """Two agents, two recorded iterations, b_lambda 1."""
    trace = MetricsTrace(n_tasks=2, header={"b_lambda": 1.0, **(header or {})})
    lam, nu = np.array([0.5, 0.0]), np.zeros(2)
    trace.add_row(0, 0, [0.0, 1.0], 0.4, 0.0, math.nan, lam, nu)
    trace.add_row(0, 1, [1.0, 1.0], 0.0, 0.0, math.nan, lam, nu)
    trace.add_row(1, 0, [1.0, 2.0], 0.0, 0.0, math.nan, lam, nu)
    trace.add_row(1, 1, [1.0, 1.0], 0.2, 0.0, math.nan, lam, nu)
    return trace


def test_load_config_sources(tmp_path):
    config = load_config(TINY_PDNPG, "pdnpg")
    assert config.K == 30
    assert config.mode == "decentral"
    raw = json.dumps(TINY_PDNPG, sort_keys=True).encode()
    assert config.config_hash == hashlib.sha256(raw).hexdigest()

    path = tmp_path / "config.json"
    path.write_bytes(b'{"problem": {"preset": "tiny_cmdp"}, "graph": {"preset": "ring"}, "K": 5}')
    from_file = load_config(str(path), "pdnpg")
    assert from_file.raw == path.read_bytes()
    assert from_file.config_hash != config.config_hash


def test_config_hash_tracks_content():
    first = load_config(TINY_PDNPG, "pdnpg")
    second = load_config({**TINY_PDNPG, "K": 31}, "pdnpg")
    assert first.config_hash != second.config_hash


@pytest.mark.parametrize(
    "doc, algorithm, pointer",
    [
        ({**TINY_PDNPG, "beta0": 0.5}, "pdnpg", "/beta0"),
        ({**TINY_PDNPG, "graph": None}, "pdnpg", "/graph"),
        ({"problem": {"preset": "tiny_cmdp"}, "graph": {"preset": "ring"}}, "pdnac", "/K"),
        ({**TINY_PDNPG, "K": 0}, "pdnpg", "/K"),
        ({**TINY_PDNPG, "K": 2.5}, "pdnpg", "/K"),
        ({**TINY_PDNPG, "alpha0": "big"}, "pdnpg", "/alpha0"),
        ({**TINY_PDNPG, "mode": "federated"}, "pdnpg", "/mode"),
        ({**TINY_PDNPG, "eps0": -0.1}, "pdnac", "/eps0"),
        ({**TINY_PDNPG, "progress": "yes"}, "pdnpg", "/progress"),
        ({**TINY_PDNPG, "features": 3}, "lfa", "/features"),
    ],
)
def test_load_config_errors(doc, algorithm, pointer):
    with pytest.raises(ConfigException) as e:
        load_config(doc, algorithm)
    assert e.value.pointer == pointer


def test_load_config_rejects_bad_json():
    with pytest.raises(ConfigException) as e:
        load_config(b"{not json", "pdnpg")
    assert e.value.pointer == ""
    with pytest.raises(ConfigException):
        load_config(b"[1, 2]", "pdnpg")
    with pytest.raises(DataException):
        load_config(TINY_PDNPG, "reinforce")


def test_lfa_config_accepts_delta_without_k():
    doc = {k: v for k, v in TINY_PDNPG.items() if k != "K"}
    config = load_config({**doc, "delta": 0.25}, "lfa")
    assert config.K is None
    assert config.delta == 0.25


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "42")
    assert load_config({**TINY_PDNPG, "seed": 3}, "pdnpg").seed == 42
    monkeypatch.setenv(SEED_ENV_VAR, "many")
    with pytest.raises(ConfigException) as e:
        load_config(TINY_PDNPG, "pdnpg")
    assert e.value.pointer == "/seed"


def test_build_problem_presets(three_mazes, tiny_constrained_problem):
    mazes = build_problem({"preset": "three_mazes"})
    assert mazes.n_tasks == 3
    assert_allclose(mazes.rewards, three_mazes.rewards)
    assert_allclose(mazes.lower_bounds, [5.0, 50.0, 500.0])
    free = build_problem({"preset": "three_mazes", "lower": [None, None, None]})
    assert np.all(np.isneginf(free.lower_bounds))

    tiny = build_problem({"preset": "tiny_cmdp", "seed": 7})
    assert_allclose(tiny.rewards, tiny_constrained_problem.rewards)
    assert_allclose(tiny.lower_bounds, tiny_constrained_problem.lower_bounds)
    # Without its own seed the tiny problem follows the run seed
    assert not np.allclose(
        build_problem({"preset": "tiny_cmdp"}, seed=1).rewards,
        build_problem({"preset": "tiny_cmdp"}, seed=2).rewards,
    )


def test_build_problem_from_documents():
    doc = {
        "grid": [1, 2],
        "walls": [],
        "bridges": [],
        "start": [0, 0],
        "goal": [0, 1],
        "goal_bonus": [1.0],
        "move_reward": [-0.1],
        "gamma": 0.9,
    }
    assert build_problem({"maze": doc}).n_states == 2


@pytest.mark.parametrize(
    "cfg, pointer",
    [
        ({"preset": "torus"}, "/problem/preset"),
        ({"preset": "three_mazes", "colour": 1}, "/problem/colour"),
        ({"preset": "tiny_cmdp", "shape": 1}, "/problem/shape"),
        ({}, "/problem"),
        ({"maze": {"grid": [2]}}, "/problem"),
    ],
)
def test_build_problem_errors(cfg, pointer):
    with pytest.raises(ConfigException) as e:
        build_problem(cfg)
    assert e.value.pointer == pointer


def test_run_experiment_writes_readable_trace(tmp_path):
    config = load_config(TINY_PDNPG, "pdnpg")
    path = tmp_path / "trace.csv"
    result = run_experiment(config, str(path))
    assert result.status == EXIT_OK
    written = read_trace(str(path))
    assert written.header["config_hash"] == config.config_hash
    assert written.header["seed"] == "0"
    assert written.header["algorithm"] == "pdnpg"
    pd.testing.assert_frame_equal(written.to_frame(), result.trace.to_frame())


def test_run_experiment_is_byte_deterministic(tmp_path):
    config = load_config({**TINY_PDNPG, "K": 40, "eval_every": 10}, "pdnac")
    paths = [tmp_path / "first.csv", tmp_path / "second.csv"]
    for path in paths:
        assert run_experiment(config, str(path)).status == EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_run_experiment_lfa():
    config = load_config(
        {**TINY_PDNPG, "K": 4, "T": 20, "features": "tiles:2", "eps_max": 10.0, "eval_every": 2},
        "lfa",
    )
    result = run_experiment(config)
    assert result.status == EXIT_OK
    assert result.trace.header["features"] == "tiles:2"
    assert result.trace.header["T"] == 20


def test_run_experiment_config_error():
    config = load_config({**TINY_PDNPG, "graph": {"preset": "ring", "n": 3}}, "pdnpg")
    result = run_experiment(config)
    assert result.status == EXIT_CONFIG_ERROR
    assert result.trace is None
    assert "/graph/n" in result.message


def test_run_experiment_numerical_failure(tmp_path, monkeypatch):
    def failing_run(**kwargs):
        trace = MetricsTrace(n_tasks=2, header=kwargs["header"], writer=kwargs["writer"]).start()
        trace.add_row(0, 0, [0.5, 0.5], 0.0, 0.0, math.nan, np.zeros(2), np.zeros(2))
        raise NumericalFailure("stationary solve is singular")

    monkeypatch.setattr(harness, "run_pdnpg", failing_run)
    path = tmp_path / "trace.csv"
    result = run_experiment(load_config(TINY_PDNPG, "pdnpg"), str(path))
    assert result.status == EXIT_NUMERICAL_FAILURE
    partial = read_trace(str(path))
    assert len(partial.rows) == 1
    assert partial.header["error"] == "stationary solve is singular"
    assert not score_trace(partial, thresholds={"dual_bounds": False})["passed"]


def test_run_experiment_contract_breach_keeps_partial_trace(tmp_path, monkeypatch):
    def breaking_run(**kwargs):
        trace = MetricsTrace(n_tasks=2, header=kwargs["header"], writer=kwargs["writer"]).start()
        trace.add_row(0, 0, [0.5, 0.5], 0.0, 0.0, math.nan, np.zeros(2), np.zeros(2))
        raise DataException("policy row not a distribution")

    monkeypatch.setattr(harness, "run_pdnpg", breaking_run)
    path = tmp_path / "trace.csv"
    result = run_experiment(load_config(TINY_PDNPG, "pdnpg"), str(path))
    assert result.status == EXIT_NUMERICAL_FAILURE
    assert result.trace is None
    partial = read_trace(str(path))
    assert len(partial.rows) == 1
    assert partial.header["error"] == "policy row not a distribution"


def test_run_experiment_unexpected_error_writes_footer(tmp_path, monkeypatch):
    def crashing_run(**kwargs):
        trace = MetricsTrace(n_tasks=2, header=kwargs["header"], writer=kwargs["writer"]).start()
        trace.add_row(0, 0, [0.5, 0.5], 0.0, 0.0, math.nan, np.zeros(2), np.zeros(2))
        raise KeyError("lambda")

    monkeypatch.setattr(harness, "run_pdnpg", crashing_run)
    path = tmp_path / "trace.csv"
    with pytest.raises(KeyError):
        run_experiment(load_config(TINY_PDNPG, "pdnpg"), str(path))
    partial = read_trace(str(path))
    assert len(partial.rows) == 1
    assert partial.header["error"].startswith("KeyError")


def test_oracle_value_on_mazes():
    constrained = build_problem({"preset": "three_mazes"})
    feasible = task_values(constrained, bridge_policy(constrained, FEASIBLE_BRIDGE)).mean()
    assert oracle_value(constrained) == pytest.approx(feasible)

    free = build_problem({"preset": "three_mazes", "lower": [None, None, None]})
    best = task_values(free, bridge_policy(free, UNCONSTRAINED_BRIDGE)).mean()
    assert oracle_value(free) == pytest.approx(best)
    assert best > feasible


def test_oracle_value_on_tabular(tiny_constrained_problem):
    assert oracle_value(tiny_constrained_problem) == pytest.approx(
        tiny_cmdp_oracle(tiny_constrained_problem).value
    )
    assert oracle_value(random_problem(8, 3, 2, gamma=0.8, seed=0)) is None


def test_running_average_error():
    trace = hand_trace()
    # agent 0: violation 0.2, v0 mean 1.0; agent 1: violation 0.1, v0 mean 1.0
    assert running_average_error(trace, None) == pytest.approx(0.2)
    assert running_average_error(trace, 1.5) == pytest.approx(0.7)
    assert running_average_error(trace, 0.5) == pytest.approx(0.2)


def test_score_trace_predicates():
    verdict = score_trace(hand_trace(), thresholds={"max_final_violation": 0.25})
    assert verdict["passed"]
    names = [p["name"] for p in verdict["predicates"]]
    assert names == ["complete", "row_order", "max_final_violation", "dual_bounds"]

    verdict = score_trace(hand_trace(), thresholds={"max_final_violation": 0.1, "min_final_v0": 2.0})
    failed = {p["name"]: p for p in verdict["predicates"] if not p["passed"]}
    assert not verdict["passed"]
    assert set(failed) == {"max_final_violation", "min_final_v0"}
    assert failed["max_final_violation"]["value"] == pytest.approx(0.2)


def test_score_trace_catches_bad_traces():
    trace = hand_trace({"b_lambda": 0.25, "consensus_bound": -1.0})
    failed = {p["name"] for p in score_trace(trace)["predicates"] if not p["passed"]}
    assert failed == {"dual_bounds", "consensus_envelope"}

    unordered = hand_trace()
    unordered.rows = [unordered.rows[1], unordered.rows[0]] + unordered.rows[2:]
    assert not score_trace(unordered)["passed"]

    with pytest.raises(DataException):
        score_trace(MetricsTrace(n_tasks=2))
    with pytest.raises(DataException):
        score_trace(MetricsTrace(n_tasks=2, rows=hand_trace().rows))


def test_score_trace_of_a_run(tiny_constrained_problem):
    result = run_experiment(load_config(TINY_PDNPG, "pdnpg"))
    verdict = score_trace(result.trace, tiny_constrained_problem)
    assert verdict["passed"]
    assert "consensus_envelope" in [p["name"] for p in verdict["predicates"]]


def test_thresholds_round_trip(tmp_path):
    path = tmp_path / "thresholds.json"
    save_thresholds({"max_final_violation": 0.1}, str(path))
    assert load_thresholds(str(path)) == {**DEFAULT_THRESHOLDS, "max_final_violation": 0.1}
    path.write_text('{"max_gap": 1}')
    with pytest.raises(ConfigException) as e:
        load_thresholds(str(path))
    assert e.value.pointer == "/max_gap"


def test_rate_sweep():
    config = load_config(TINY_PDNPG, "pdnpg")
    result = rate_sweep(config, [10, 20, 40], seeds=[0, 1])
    assert result.metric == "gap+violation"
    assert len(result.table) == 6
    assert list(result.ratios["K"]) == [10, 20, 40]
    assert list(result.ratios.columns) == ["K", "median_error", "ratio_to_next"]
    assert np.isnan(result.ratios["ratio_to_next"].iloc[-1])
    assert np.all(result.table["error"] >= result.table["violation"])
    with pytest.raises(DataException):
        rate_sweep(config, [10, 10])


@pytest.mark.slow
def test_rate_sweep_error_halves_when_k_quadruples():
    config = load_config({**TINY_PDNPG, "eval_every": 1}, "pdnpg")
    result = rate_sweep(config, [500, 2000], seeds=range(5))
    assert result.metric == "gap+violation"
    coarse, fine = result.ratios["median_error"]
    budget = tiny_cmdp_oracle(build_problem(config.problem)).resolution_error
    assert fine <= 0.7 * coarse + budget
    assert (coarse + budget) / max(fine - budget, 1e-12) >= 1.5
    assert (coarse - budget) / (fine + budget) <= 2.8
    assert result.slope < 0


def test_rate_sweep_without_oracle_uses_violation(monkeypatch):
    monkeypatch.setattr(harness, "oracle_value", lambda problem: None)
    result = rate_sweep(load_config(TINY_PDNPG, "pdnpg"), [10, 20])
    assert result.metric == "violation"
    assert result.table["oracle"].isna().all()
    assert_allclose(result.table["error"], result.table["violation"])


def test_maze_bridges(three_mazes):
    feasible = bridge_policy(three_mazes, FEASIBLE_BRIDGE)
    assert maze_bridges(three_mazes, np.stack([feasible] * 3)) == [[4], [4], [4]]
    # A single central policy is shared by every agent
    assert maze_bridges(three_mazes, feasible[None]) == [[4], [4], [4]]


@pytest.mark.slow
def test_maze_demo(tmp_path):
    summary = maze_demo(out_dir=str(tmp_path))
    assert summary["constrained"]["bridges"] == [[FEASIBLE_BRIDGE]] * 3
    assert summary["unconstrained"]["bridges"] == [[UNCONSTRAINED_BRIDGE]] * 3
    assert max(summary["unconstrained"]["final_violation"]) > 0
    assert (tmp_path / "maze_demo.json").exists()
    assert (tmp_path / "maze_constrained.csv").exists()


def test_spectrum_and_write_frame(tmp_path):
    weights = spectrum({"preset": "ring", "n": 5})
    assert weights.n_agents == 5
    path = tmp_path / "frame.csv"
    frame = pd.DataFrame({"K": [10, 20], "error": [0.1, 1.0 / 3.0]})
    write_frame(frame, str(path))
    assert pd.read_csv(path)["error"].iloc[1] == 1.0 / 3.0
