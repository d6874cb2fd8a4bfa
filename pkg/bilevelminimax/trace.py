"""Solver traces: per-iteration records, JSONL trace files and the CSV report.

A trace file holds one JSON object per line: a `header` line naming the run,
one `iter` line per outer iteration, `checkpoint` lines carrying a nested KKT
report, and a closing `final` line with the termination reason.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Optional, TextIO

import numpy as np

from .const import REPORT_COLUMNS

_LOGGER = logging.getLogger(__name__)

LINE_HEADER = "header"
LINE_ITER = "iter"
LINE_CHECKPOINT = "checkpoint"
LINE_FINAL = "final"

_INT_FIELDS = (
    "outer_k",
    "oracle_calls_total",
    "oracle_calls_f1",
    "oracle_calls_ftilde1",
    "wall_ms",
    "inner_steps",
)
_FLOAT_FIELDS = (
    "upper_objective",
    "lower_optimality_gap",
    "infeasibility",
    "eps_k",
    "primal_step_norm",
)


class TraceFormatError(ValueError):
    """A malformed trace line; `line_no` is 1-based."""

    def __init__(self, path, line_no: int, reason: str) -> None:
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


@dataclass
class TraceRecord:
    outer_k: int
    oracle_calls_total: int
    oracle_calls_f1: int
    oracle_calls_ftilde1: int
    upper_objective: float
    lower_optimality_gap: float
    infeasibility: float
    eps_k: float
    primal_step_norm: float
    wall_ms: int = 0
    inner_steps: int = 0
    kkt: Optional[Dict] = None

    @property
    def is_checkpoint(self) -> bool:
        return self.kkt is not None

    def to_dict(self, wall_clock: bool = True) -> Dict:
        """Return the JSON form; wall_ms is left out unless `wall_clock`."""
        result = {"type": LINE_CHECKPOINT if self.is_checkpoint else LINE_ITER}
        result.update(asdict(self))
        if not wall_clock:
            del result["wall_ms"]
        if self.kkt is None:
            del result["kkt"]
        return result

    @classmethod
    def from_dict(cls, data: Dict) -> "TraceRecord":
        known = {f.name for f in fields(cls)}
        missing = [k for k in _INT_FIELDS + _FLOAT_FIELDS if k not in data]
        if set(missing) - {"wall_ms", "inner_steps"}:
            raise ValueError(f"record is missing {sorted(missing)}")

        values = {k: v for k, v in data.items() if k in known}
        for key in _INT_FIELDS:
            if key in values:
                values[key] = int(values[key])
        for key in _FLOAT_FIELDS:
            values[key] = float(values[key])
            if not math.isfinite(values[key]):
                raise ValueError(f"{key}={values[key]} is not finite")
        return cls(**values)


@dataclass
class TraceRun:
    header: Dict
    records: List[TraceRecord] = field(default_factory=list)
    final: Optional[Dict] = None

    @property
    def iterations(self) -> List[TraceRecord]:
        return [r for r in self.records if not r.is_checkpoint]


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def dumps(data: Dict) -> str:
    """Return compact, key-sorted JSON (numpy values converted)."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_default)


def trace_lines(
    header: Dict,
    records: Iterable[TraceRecord],
    final: Optional[Dict] = None,
    wall_clock: bool = False,
) -> List[str]:
    lines = [dumps(dict(header, type=LINE_HEADER))]
    lines += [dumps(r.to_dict(wall_clock)) for r in records]
    if final is not None:
        lines.append(dumps(dict(final, type=LINE_FINAL)))
    return lines


def write_trace(path, header, records, final=None, wall_clock: bool = False) -> None:
    with open(path, mode="w") as fh:
        for line in trace_lines(header, records, final, wall_clock):
            fh.write(line + "\n")


def parse_trace(lines: Iterable[str], path="<trace>") -> TraceRun:
    """Return the run described by trace lines (TraceFormatError on bad input)."""
    run = None
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(path, line_no, f"invalid JSON ({exc.msg})")
        if not isinstance(data, dict):
            raise TraceFormatError(path, line_no, "a trace line must be an object")

        kind = data.pop("type", None)
        if kind == LINE_HEADER:
            if run is not None:
                raise TraceFormatError(path, line_no, "duplicate header")
            run = TraceRun(header=data)
            continue
        if run is None:
            raise TraceFormatError(path, line_no, "trace does not start with a header")

        if kind in (LINE_ITER, LINE_CHECKPOINT):
            try:
                run.records.append(TraceRecord.from_dict(data))
            except (TypeError, ValueError) as exc:
                raise TraceFormatError(path, line_no, str(exc))
        elif kind == LINE_FINAL:
            run.final = data
        else:
            raise TraceFormatError(path, line_no, f"unknown line type {kind!r}")

    if run is None:
        raise TraceFormatError(path, 1, "empty trace")
    return run


def read_trace(path) -> TraceRun:
    with open(path, mode="r") as fh:
        return parse_trace(fh, path)


def write_result(path, result: Dict) -> None:
    with open(path, mode="w") as fh:
        fh.write(json.dumps(result, sort_keys=True, indent=2, default=_default) + "\n")


def run_row(run: TraceRun) -> Dict:
    """Return the report row of one run: its final iterate's metrics."""
    iterations = run.iterations
    if not iterations:
        raise ValueError("trace has no iteration records")
    last = iterations[-1]
    final = run.final or {}
    return {
        "family": run.header.get("family", ""),
        "instance": run.header.get("instance", ""),
        "seed": run.header.get("seed", ""),
        "terminated_by": final.get("terminated_by", ""),
        "outer_iters": final.get("outer_iters", last.outer_k + 1),
        "upper_objective": last.upper_objective,
        "lower_optimality_gap": last.lower_optimality_gap,
        "infeasibility": last.infeasibility,
        "oracle_calls": last.oracle_calls_total,
        "wall_ms": last.wall_ms,
    }


def _aggregate(rows: List[Dict], label: str, func) -> Dict:
    result = {k: "" for k in REPORT_COLUMNS}
    result.update(family=rows[0]["family"], instance=rows[0]["instance"], seed=label)
    for key in (
        "outer_iters",
        "upper_objective",
        "lower_optimality_gap",
        "infeasibility",
        "oracle_calls",
        "wall_ms",
    ):
        result[key] = float(func([float(r[key]) for r in rows]))
    return result


def report_sections(runs: Iterable[TraceRun]) -> Dict[str, List[Dict]]:
    """Return the report rows grouped by family.

    Each instance's per-seed rows are followed by `mean` and `median` rows
    when it has more than one run.
    """
    by_family: Dict[str, Dict[str, List[Dict]]] = {}
    for run in runs:
        row = run_row(run)
        instances = by_family.setdefault(str(row["family"]), {})
        instances.setdefault(str(row["instance"]), []).append(row)

    sections = {}
    for family in sorted(by_family):
        rows = []
        for instance in sorted(by_family[family]):
            group = by_family[family][instance]
            rows += group
            if len(group) > 1:
                rows.append(_aggregate(group, "mean", np.mean))
                rows.append(_aggregate(group, "median", np.median))
        sections[family] = rows
    return sections


def write_report(runs: Iterable[TraceRun], stream: TextIO) -> None:
    """Write the CSV report: one section (header plus rows) per family."""
    for i, (family, rows) in enumerate(report_sections(runs).items()):
        if i:
            stream.write("\n")
        writer = csv.DictWriter(stream, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        _LOGGER.debug("report: %s rows for %s", len(rows), family)
