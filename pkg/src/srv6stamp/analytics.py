"""Controller-side delay computation, running averages and export.

Delays are exact integer nanoseconds taken from the NTP timestamps of a
record.  Running averages use Welford's update in double precision, where
``n`` is the count after the new sample is included.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

from .errors import EmptySeriesError, IoError
from .sender import DelayMode, MeasurementRecord
from .timebase import ntp_diff

COLUMNS = ("sample_index", "wall_time", "d_d_ns", "d_r_ns", "avg_d_ns", "avg_r_ns")
TWO_WAY_COLUMN = "two_way_ns"


@dataclass(frozen=True)
class DelaySample:
    d_d: int
    d_r: int
    sample_index: int = 0
    wall_time: int = 0

    @property
    def negative(self) -> bool:
        """True when either delay is below zero, i.e. the clocks disagree."""
        return self.d_d < 0 or self.d_r < 0

    @property
    def two_way(self) -> int:
        return self.d_d + self.d_r


def compute_delays(r: MeasurementRecord, sample_index: int = 0) -> DelaySample:
    return DelaySample(
        d_d=ntp_diff(r.t2, r.t1),
        d_r=ntp_diff(r.t4, r.t3),
        sample_index=sample_index,
        wall_time=r.received_at,
    )


@dataclass(frozen=True)
class WelfordState:
    n: int = 0
    avg_d: Optional[float] = None
    avg_r: Optional[float] = None


def welford_update(w: WelfordState, s: DelaySample) -> WelfordState:
    n = w.n + 1
    if w.n == 0:
        return WelfordState(n, float(s.d_d), float(s.d_r))
    return WelfordState(n, w.avg_d + (s.d_d - w.avg_d) / n, w.avg_r + (s.d_r - w.avg_r) / n)


@dataclass(frozen=True)
class SeriesRow:
    sample_index: int
    wall_time: int
    d_d_ns: int
    d_r_ns: int
    avg_d_ns: float
    avg_r_ns: float

    def as_dict(self, two_way: bool = False) -> dict:
        d = {c: getattr(self, c) for c in COLUMNS}
        if two_way:
            d[TWO_WAY_COLUMN] = self.d_d_ns + self.d_r_ns
        return d


@dataclass
class SessionAnalytics:
    """Running analytics for one session, fed by polled record batches."""

    ssid: int = 0
    delay_mode: DelayMode = DelayMode.TWO_WAY
    state: WelfordState = field(default_factory=WelfordState)
    rows: List[SeriesRow] = field(default_factory=list)
    negative: int = 0

    def add(self, record: MeasurementRecord) -> SeriesRow:
        s = compute_delays(record, self.state.n)
        self.state = welford_update(self.state, s)
        if s.negative:
            self.negative += 1
        row = SeriesRow(s.sample_index, s.wall_time, s.d_d, s.d_r, self.state.avg_d, self.state.avg_r)
        self.rows.append(row)
        return row

    def extend(self, records: Iterable[MeasurementRecord]) -> List[SeriesRow]:
        return [self.add(r) for r in records]

    @property
    def two_way(self) -> bool:
        return DelayMode(self.delay_mode) is DelayMode.TWO_WAY

    def summary(self) -> dict:
        if not self.rows:
            raise EmptySeriesError("no samples collected")
        dd = [r.d_d_ns for r in self.rows]
        dr = [r.d_r_ns for r in self.rows]
        out = {
            "ssid": self.ssid,
            "samples": len(self.rows),
            "negative_samples": self.negative,
            "avg_d_ns": self.state.avg_d,
            "avg_r_ns": self.state.avg_r,
            "min_d_ns": min(dd), "max_d_ns": max(dd),
            "min_r_ns": min(dr), "max_r_ns": max(dr),
        }
        if self.two_way:
            out["avg_two_way_ns"] = self.state.avg_d + self.state.avg_r
        return out


def series_from_records(records: Iterable[MeasurementRecord], **kw) -> SessionAnalytics:
    a = SessionAnalytics(**kw)
    a.extend(records)
    return a


def _rows(series) -> tuple:
    if isinstance(series, SessionAnalytics):
        return series.rows, series.two_way
    return list(series), False


def export(series, fmt: str, path) -> Path:
    """Write the series as CSV or JSON.  JSON is a list of row objects with the CSV fields."""
    rows, two_way = _rows(series)
    if not rows:
        raise EmptySeriesError("nothing to export")
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as f:
                write_csv(rows, f, two_way)
        elif fmt == "json":
            path.write_text(json.dumps([r.as_dict(two_way) for r in rows], indent=1) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def write_csv(rows, f, two_way: bool = False, header: bool = True) -> None:
    w = csv.DictWriter(f, fieldnames=COLUMNS + ((TWO_WAY_COLUMN,) if two_way else ()), lineterminator="\n")
    if header:
        w.writeheader()
    for r in rows:
        d = r.as_dict(two_way)
        d["avg_d_ns"] = repr(d["avg_d_ns"])
        d["avg_r_ns"] = repr(d["avg_r_ns"])
        w.writerow(d)


def _row_from(d: dict) -> SeriesRow:
    return SeriesRow(int(d["sample_index"]), int(d["wall_time"]), int(d["d_d_ns"]), int(d["d_r_ns"]),
                     float(d["avg_d_ns"]), float(d["avg_r_ns"]))


def load(path) -> List[SeriesRow]:
    """Read back a file written by export (format chosen by suffix)."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            return [_row_from(d) for d in json.loads(path.read_text())]
        with path.open(newline="") as f:
            return [_row_from(d) for d in csv.DictReader(f)]
    except OSError as exc:
        raise IoError(str(exc)) from exc
