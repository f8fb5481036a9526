"""Deterministic report files.

Records are written as JSON Lines with sorted keys and ``repr``-exact floats,
and tables as CSV with a fixed column order, so identical inputs produce
identical bytes. Nothing time- or host-dependent is recorded.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import __version__


def _plain(obj):
    """Convert numpy scalars and arrays, and non-finite floats, to JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def dumps(record: dict) -> str:
    return json.dumps(_plain(record), sort_keys=True, separators=(",", ":"))


@dataclass
class ReportRecord:
    """One metric for one (experiment, n, scenario) cell, with provenance."""

    experiment: str
    config_hash: str
    metric: str
    value: float
    se: Optional[float] = None
    verdict: Optional[str] = None
    n: Optional[int] = None
    scenario: Optional[int] = None
    seed: Optional[int] = None
    module_version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class ReportWriter:
    """Single appender for one experiment's JSON Lines and CSV files.

    Parameters
    ----------
    directory : path
        Created if missing.
    experiment, config_hash : str
        Stamped on every record.
    seed : int
    """

    def __init__(self, directory, experiment: str, config_hash: str, seed: int):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.experiment = experiment
        self.config_hash = config_hash
        self.seed = int(seed)
        self.records: list = []
        self._opened: set = set()

    def record(self, metric: str, value, *, se=None, verdict=None, n=None, scenario=None, stream: str = "records",
               **extra) -> ReportRecord:
        rec = ReportRecord(self.experiment, self.config_hash, metric, _plain(value),
                           None if se is None else _plain(se), verdict,
                           None if n is None else int(n), None if scenario is None else int(scenario),
                           self.seed, extra=_plain(extra))
        self.records.append(rec)
        self._append(f"{stream}.jsonl", dumps(rec.to_dict()) + "\n")
        return rec

    def _append(self, name: str, text: str) -> None:
        path = self.directory / name
        mode = "a" if name in self._opened else "w"
        self._opened.add(name)
        with open(path, mode, encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
        """Whole-table CSV with provenance columns appended to every row."""
        path = self.directory / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(header) + ["config_hash", "seed", "module_version"])
            for row in rows:
                w.writerow([_cell(x) for x in row] + [self.config_hash, self.seed, __version__])
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.directory / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_plain(payload), fh, sort_keys=True, indent=1)
            fh.write("\n")
        return path


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x
