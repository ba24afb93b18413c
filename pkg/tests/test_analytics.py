import csv
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srv6stamp.analytics import (
    COLUMNS, DelaySample, SessionAnalytics, WelfordState, compute_delays, export, load,
    series_from_records, welford_update,
)
from srv6stamp.codec import NtpTimestamp
from srv6stamp.errors import EmptySeriesError, IoError
from srv6stamp.sender import DelayMode, MeasurementRecord
from srv6stamp.timebase import unix_ns_to_ntp

BASE = 1_700_000_000 * 10**9
MS = 1_000_000


def rec(t1, d_d, t3_gap, d_r, i=0):
    t2 = t1 + d_d
    t3 = t2 + t3_gap
    return MeasurementRecord(42, i, i, unix_ns_to_ntp(t1), unix_ns_to_ntp(t2), unix_ns_to_ntp(t3),
                             unix_ns_to_ntp(t3 + d_r), 64, t3 + d_r)


def test_zero_delays():
    t = NtpTimestamp(3_900_000_000, 5)
    s = compute_delays(MeasurementRecord(1, 0, 0, t, t, t, t, 64, 0))
    assert (s.d_d, s.d_r) == (0, 0) and not s.negative


def test_five_and_seven_ms():
    s = compute_delays(rec(BASE, 5 * MS, 100, 7 * MS))
    assert (s.d_d, s.d_r, s.two_way) == (5 * MS, 7 * MS, 12 * MS)


def test_negative_kept_and_flagged():
    a = SessionAnalytics()
    a.add(rec(BASE, -2 * MS, 0, 3 * MS))
    assert a.rows[0].d_d_ns == -2 * MS and a.negative == 1


def test_first_sample():
    w = welford_update(WelfordState(), DelaySample(4, 6))
    assert (w.n, w.avg_d, w.avg_r) == (1, 4.0, 6.0)


def test_small_mean():
    w = WelfordState()
    for d in (2, 4, 6):
        w = welford_update(w, DelaySample(d, 0))
    assert w.avg_d == 4.0 and w.n == 3


def test_empty_state_has_no_average():
    assert WelfordState().avg_d is None


@settings(max_examples=300)
@given(st.lists(st.integers(-10**10, 10**10), min_size=1, max_size=300))
def test_welford_matches_exact_mean(xs):
    w = WelfordState()
    for x in xs:
        w = welford_update(w, DelaySample(x, -x))
    exact = Fraction(sum(xs), len(xs))
    assert abs(w.avg_d - exact) <= 1e-9 * max(1, abs(exact))
    assert abs(w.avg_r + exact) <= 1e-9 * max(1, abs(exact))


@settings(max_examples=100)
@given(st.lists(st.integers(0, 10**9), min_size=2, max_size=200), st.randoms())
def test_welford_order_independent_within_tolerance(xs, rnd):
    def run(seq):
        w = WelfordState()
        for x in seq:
            w = welford_update(w, DelaySample(x, x))
        return w.avg_d
    ys = list(xs)
    rnd.shuffle(ys)
    a, b = run(xs), run(ys)
    assert abs(a - b) <= 1e-9 * max(1, abs(a))


@settings(max_examples=200)
@given(st.integers(0, 10**15), st.integers(-10**9, 10**9), st.integers(0, 10**12))
def test_delay_shift_invariance(t1, d, c):
    """Adding the same constant to T1 and T2 leaves d_d unchanged (up to fraction truncation)."""
    a = compute_delays(rec(BASE + t1, d, 0, 0))
    b = compute_delays(rec(BASE + t1 + c, d, 0, 0))
    assert abs(a.d_d - b.d_d) <= 1


def _series(n=3, mode=DelayMode.TWO_WAY):
    rng = random.Random(1)
    recs = [rec(BASE + i * 10 * MS, rng.randrange(1, 9 * MS), 50, rng.randrange(1, 9 * MS), i) for i in range(n)]
    return series_from_records(recs, ssid=42, delay_mode=mode)


def test_csv_export_shape(tmp_path):
    a = _series(3)
    path = export(a, "csv", tmp_path / "s.csv")
    rows = list(csv.reader(path.open()))
    assert len(rows) == 4
    assert rows[0] == list(COLUMNS) + ["two_way_ns"]


def test_one_way_has_no_two_way_column(tmp_path):
    path = export(_series(2, DelayMode.ONE_WAY), "csv", tmp_path / "s.csv")
    assert path.read_text().splitlines()[0] == ",".join(COLUMNS)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_roundtrip(tmp_path, fmt):
    a = _series(50)
    path = export(a, fmt, tmp_path / f"s.{fmt}")
    assert load(path) == a.rows


def test_json_mirrors_csv(tmp_path):
    a = _series(5)
    j = json.loads(export(a, "json", tmp_path / "s.json").read_text())
    c = list(csv.DictReader(export(a, "csv", tmp_path / "s.csv").open()))
    assert [list(r) for r in j] == [list(r) for r in c]
    assert [str(r["d_d_ns"]) for r in j] == [r["d_d_ns"] for r in c]


def test_empty_series(tmp_path):
    with pytest.raises(EmptySeriesError):
        export(SessionAnalytics(), "csv", tmp_path / "x.csv")
    with pytest.raises(EmptySeriesError):
        SessionAnalytics().summary()


def test_io_error(tmp_path):
    with pytest.raises(IoError):
        export(_series(1), "csv", tmp_path / "missing" / "x.csv")
    with pytest.raises(IoError):
        load(tmp_path / "nope.csv")


def test_summary():
    a = _series(10)
    s = a.summary()
    assert s["samples"] == 10
    assert s["avg_two_way_ns"] == pytest.approx(s["avg_d_ns"] + s["avg_r_ns"])
    assert s["min_d_ns"] <= s["avg_d_ns"] <= s["max_d_ns"]
