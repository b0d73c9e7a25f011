"""Append-only CSV metrics.

Columns, in order::

    phase,iteration,mean_raw_reward,loss,eta,beta,wall_clock_s

``phase`` is ``rollout`` for training iterations and ``eval`` for held-out
evaluations. Floats use Python's shortest round-trip repr, so identical runs
write identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

COLUMNS = ("phase", "iteration", "mean_raw_reward", "loss", "eta", "beta", "wall_clock_s")
HEADER = ",".join(COLUMNS)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Appends rows to ``path``, writing the header only when the file is new.

    With ``record_wall_clock=False`` the wall-clock column is written as 0.0.
    """

    def __init__(self, path, record_wall_clock=True):
        self.path = Path(path)
        self.record_wall_clock = record_wall_clock
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if not fresh:
            with open(self.path, newline="") as fh:
                first = fh.readline().rstrip("\r\n")
            if first != HEADER:
                raise ValueError(f"{self.path} exists with a different header: {first!r}")
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(COLUMNS)
            self._fh.flush()

    def __call__(self, row: dict):
        missing = set(COLUMNS) - set(row)
        if missing:
            raise ValueError(f"row lacks columns {sorted(missing)}")
        row = dict(row)
        if not self.record_wall_clock:
            row["wall_clock_s"] = 0.0
        self._w.writerow([_fmt(row[c]) for c in COLUMNS])
        self._fh.flush()

    emit = __call__

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    """Rows as dicts with numeric columns parsed to float (iteration to int)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            out = {"phase": r["phase"], "iteration": int(r["iteration"])}
            for c in COLUMNS[2:]:
                out[c] = float(r[c])
            rows.append(out)
    return rows
