import json

import numpy as np
import pandas as pd
import pytest

from cmtrl.pipeline.run_cmtrl import get_parser, main
from cmtrl.resources.basics import SEED_ENV_VAR
from cmtrl.resources.resource_utils import NumericalFailure
from cmtrl.utils import harness
from cmtrl.utils.consensus_net import lazy_metropolis, preset_graph


TINY = {
    "problem": {"preset": "tiny_cmdp", "seed": 7},
    "graph": {"preset": "complete", "n": 2},
    "K": 20,
    "eval_every": 5,
}


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv) -> int:
    return main(get_parser().parse_args(list(argv)))


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        get_parser().parse_args([])


def test_run_writes_trace(tmp_path, config_path):
    out = tmp_path / "trace.csv"
    assert run("pdnpg", "--config", config_path, "--out", str(out)) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ")
    assert any(line.startswith("k,agent,v_task_0,v_task_1,v0,") for line in lines)


def test_run_exit_codes(tmp_path, config_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "beta0": 0.5}))
    assert run("pdnpg", "--config", str(bad)) == 2
    assert run("pdnpg", "--config", str(tmp_path / "missing.json")) == 2

    def singular(**kwargs):
        raise NumericalFailure("singular")

    monkeypatch.setattr(harness, "run_pdnpg", singular)
    assert run("pdnpg", "--config", config_path) == 3


def test_score_exit_codes(tmp_path, config_path, capsys):
    trace = tmp_path / "trace.csv"
    assert run("pdnac", "--config", config_path, "--out", str(trace)) == 0
    capsys.readouterr()

    verdict_path = tmp_path / "verdict.json"
    assert run("score", "--trace", str(trace), "--config", config_path, "--out", str(verdict_path)) == 0
    assert json.loads(verdict_path.read_text())["passed"]
    assert json.loads(capsys.readouterr().out)["passed"]

    strict = tmp_path / "strict.json"
    strict.write_text(json.dumps({"min_final_v0": 1e6}))
    assert run("score", "--trace", str(trace), "--thresholds", str(strict)) == 4

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"max_gap": 1.0}))
    assert run("score", "--trace", str(trace), "--thresholds", str(unknown)) == 2


def test_spectrum(tmp_path, capsys):
    out = tmp_path / "w.csv"
    assert run("spectrum", "--graph", '{"preset": "ring", "n": 5}', "--out", str(out)) == 0
    printed = capsys.readouterr().out.splitlines()
    expected = lazy_metropolis(preset_graph("ring", 5))
    assert printed[-1] == f"sigma2 = {expected.sigma2:.12g}"
    np.testing.assert_allclose(pd.read_csv(out, header=None).to_numpy(), expected.W)

    graph_file = tmp_path / "graph.json"
    graph_file.write_text('{"preset": "star", "n": 4}')
    assert run("spectrum", "--graph", str(graph_file)) == 0
    assert run("spectrum", "--graph", '{"preset": "torus", "n": 4}') == 2
    assert run("spectrum", "--graph", "{broken") == 2


def test_measure_eps_max(tmp_path, capsys):
    path = tmp_path / "lfa.json"
    path.write_text(json.dumps({**TINY, "features": "identity"}))
    assert run("measure-epsmax", "--config", str(path), "--n-policies", "2") == 0
    result = json.loads(capsys.readouterr().out)
    assert result["features"] == "identity"
    assert result["eps_max"] < 1e-8


def test_sweep(tmp_path, config_path, capsys):
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--config", config_path, "--K", "10", "20", "--seeds", "0", "1", "--out", str(out)) == 0
    table = pd.read_csv(out)
    assert len(table) == 4
    assert "median_error" in capsys.readouterr().out
    assert run("sweep", "--config", config_path, "--K", "10") == 2
