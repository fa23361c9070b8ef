import logging
from dataclasses import dataclass, field
from typing import Dict, IO, List, Optional, Sequence

import numpy as np
import pandas as pd

from cmtrl.resources.basics import (
    ERROR_FOOTER_KEY,
    FLOAT_FORMAT,
    HEADER_PREFIX,
    TRACE_WRITE_CHUNK,
    trace_columns,
)
from cmtrl.resources.resource_utils import DataException


logging.basicConfig(
    format="%(asctime)s (%(name)s %(lineno)s): %(message)s",
    datefmt="%m/%d/%Y %I:%M:%S %p",
)
logger = logging.getLogger("trace_utils")
logger.setLevel(logging.INFO)


def format_header_value(value) -> str:
    """Render a header value; floats use the trace float format."""
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    if isinstance(value, (list, tuple)):
        return ",".join(format_header_value(v) for v in value)
    return str(value)


class TraceWriter:
    """
    Incremental CSV sink for a MetricsTrace.

    Rows are buffered and written in chunks; `close` flushes the rest. `fail` flushes the
    buffered rows and appends an error footer so a partial trace survives an aborted run.

    :param str path: Output CSV path.
    """

    def __init__(self, path: str):
        self.path = path
        self._handle: Optional[IO] = None
        self._columns: List[str] = []
        self._buffer: List[Sequence] = []

    def open(self, header: Dict, columns: List[str]) -> None:
        """Write `# key=value` header lines followed by the column header row."""
        self._handle = open(self.path, "w", newline="")
        for key, value in header.items():
            self._handle.write(f"{HEADER_PREFIX}{key}={format_header_value(value)}\n")
        self._columns = columns
        self._handle.write(",".join(columns) + "\n")

    def write_row(self, row: Sequence) -> None:
        self._buffer.append(row)
        if len(self._buffer) >= TRACE_WRITE_CHUNK:
            self.flush()

    def flush(self) -> None:
        if self._handle is None or not self._buffer:
            return
        frame = pd.DataFrame(self._buffer, columns=self._columns)
        frame.to_csv(
            self._handle,
            header=False,
            index=False,
            float_format=FLOAT_FORMAT,
            na_rep="nan",
            lineterminator="\n",
        )
        self._buffer = []
        self._handle.flush()

    def close(self) -> None:
        if self._handle is None:
            return
        self.flush()
        self._handle.close()
        self._handle = None

    def fail(self, message: str) -> None:
        """Flush buffered rows and append the error footer line."""
        if self._handle is None:
            return
        self.flush()
        flat = " ".join(str(message).split())
        self._handle.write(f"{HEADER_PREFIX}{ERROR_FOOTER_KEY}={flat}\n")
        self._handle.close()
        self._handle = None


@dataclass(eq=False)
class MetricsTrace:
    """
    Per-iteration, per-agent metrics of one run.

    Each row holds (k, agent, V_i for every task under the agent's policy, V_0, violation,
    consensus error, critic error, lambda_i for every agent, nu_i for every agent).
    Rows must be strictly increasing in (k, agent). `summary` collects run-level counters;
    `final_policies` and `final_params` hold the last iterate.
    """

    n_tasks: int
    header: Dict = field(default_factory=dict)
    rows: List[tuple] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    final_policies: Optional[np.ndarray] = None
    final_params: Optional[np.ndarray] = None
    writer: Optional[TraceWriter] = None

    @property
    def columns(self) -> List[str]:
        return trace_columns(self.n_tasks)

    def start(self) -> "MetricsTrace":
        """Open the attached writer, if any, with the current header."""
        if self.writer is not None:
            self.writer.open(self.header, self.columns)
        return self

    def add_row(
        self,
        k: int,
        agent: int,
        values: np.ndarray,
        violation: float,
        consensus_error: float,
        critic_error: float,
        lam: np.ndarray,
        nu: np.ndarray,
    ) -> None:
        """
        Append one record.

        :param int k: Iteration index.
        :param int agent: Agent index.
        :param np.ndarray values: V_i(rho) of every task under the agent's policy.
        :param float violation: Total constraint violation of the agent's policy.
        :param float consensus_error: max_i ||theta_bar - theta_i|| at iteration k.
        :param float critic_error: Critic error of the agent, NaN when not tracked.
        :param np.ndarray lam: Lower-bound duals of all agents.
        :param np.ndarray nu: Upper-bound duals of all agents.
        :return: None.
        """
        if self.rows and (k, agent) <= (self.rows[-1][0], self.rows[-1][1]):
            raise DataException(
                f"Trace rows must increase in (k, agent); got ({k}, {agent}) after ({self.rows[-1][0]}, {self.rows[-1][1]})!"
            )
        row = (
            (int(k), int(agent))
            + tuple(float(v) for v in values)
            + (
                float(np.mean(values)),
                float(violation),
                float(consensus_error),
                float(critic_error),
            )
            + tuple(float(v) for v in lam)
            + tuple(float(v) for v in nu)
        )
        self.rows.append(row)
        if self.writer is not None:
            self.writer.write_row(row)

    def close(self) -> None:
        if self.writer is not None:
            self.writer.close()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def final_frame(self) -> pd.DataFrame:
        """Return the rows of the last recorded iteration."""
        frame = self.to_frame()
        return frame[frame["k"] == frame["k"].max()]


def read_trace(path: str) -> MetricsTrace:
    """
    Read a trace CSV back into a MetricsTrace.

    :param str path: Trace CSV written by TraceWriter.
    :return: MetricsTrace with header (string values, plus any error footer) and rows.
    """
    header = {}
    with open(path) as f:
        for line in f:
            if not line.startswith(HEADER_PREFIX):
                continue
            key, _, value = line[len(HEADER_PREFIX):].rstrip("\n").partition("=")
            header[key] = value
    try:
        frame = pd.read_csv(path, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataException(f"Malformed trace {path}: {e}!") from e
    value_columns = [c for c in frame.columns if c.startswith("v_task_")]
    n_tasks = len(value_columns)
    if n_tasks == 0 or list(frame.columns) != trace_columns(n_tasks):
        raise DataException(f"Trace {path} does not have the trace column layout!")
    trace = MetricsTrace(n_tasks=n_tasks, header=header)
    trace.rows = [
        (int(r[0]), int(r[1])) + tuple(float(x) for x in r[2:])
        for r in frame.itertuples(index=False, name=None)
    ]
    return trace
