import math

import numpy as np
import pytest

from cmtrl.resources.basics import TRACE_WRITE_CHUNK, trace_columns
from cmtrl.resources.resource_utils import DataException
from cmtrl.utils.trace import MetricsTrace, TraceWriter, format_header_value, read_trace


def fill(trace, n_rows):
    for k in range(n_rows):
        trace.add_row(k, 0, [1.0 / 3.0], 0.0, 0.0, math.nan, np.zeros(1), np.zeros(1))


def test_columns():
    assert ",".join(trace_columns(2)) == (
        "k,agent,v_task_0,v_task_1,v0,violation,consensus_error,critic_error,"
        "lambda_0,lambda_1,nu_0,nu_1"
    )


def test_header_values():
    assert format_header_value(0.1) == "0.10000000000000001"
    assert format_header_value([1, 2]) == "1,2"
    assert format_header_value("ring") == "ring"


def test_rows_must_increase():
    trace = MetricsTrace(n_tasks=1)
    fill(trace, 2)
    with pytest.raises(DataException):
        trace.add_row(1, 0, [0.0], 0.0, 0.0, math.nan, np.zeros(1), np.zeros(1))


def test_writer_round_trip_is_exact(tmp_path):
    path = tmp_path / "trace.csv"
    trace = MetricsTrace(n_tasks=1, header={"seed": 3, "alpha": 0.1}, writer=TraceWriter(str(path))).start()
    fill(trace, TRACE_WRITE_CHUNK + 3)
    trace.close()
    written = read_trace(str(path))
    assert written.header == {"seed": "3", "alpha": "0.10000000000000001"}
    assert len(written.rows) == TRACE_WRITE_CHUNK + 3
    assert written.rows[-1][2] == 1.0 / 3.0
    assert math.isnan(written.rows[-1][6])


def test_failed_run_keeps_partial_rows(tmp_path):
    path = tmp_path / "trace.csv"
    writer = TraceWriter(str(path))
    trace = MetricsTrace(n_tasks=1, writer=writer).start()
    fill(trace, 3)
    writer.fail("solve\nfailed")
    written = read_trace(str(path))
    assert len(written.rows) == 3
    assert written.header["error"] == "solve failed"
    assert path.read_text().splitlines()[-1] == "# error=solve failed"


def test_read_trace_rejects_other_layouts(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DataException):
        read_trace(str(path))
