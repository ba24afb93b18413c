import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from srv6stamp.codec import NtpTimestamp
from srv6stamp.errors import EraOverflowError
from srv6stamp.timebase import (
    NTP_UNIX_OFFSET, Clock, HostClock, SimClock, SimTimeline, now_ntp, ntp_diff, ntp_to_unix_ns,
    unix_ns_to_ntp,
)

ERA0 = st.integers(-NTP_UNIX_OFFSET * 10**9, (2**32 - NTP_UNIX_OFFSET) * 10**9 - 1)
ntp64 = st.integers(0, 2**64 - 1).map(NtpTimestamp.from_int)


def test_era_offset_matches_calendar():
    assert NTP_UNIX_OFFSET == oracles.ERA_OFFSET == 2_208_988_800


def test_unix_zero():
    assert unix_ns_to_ntp(0) == NtpTimestamp(2_208_988_800, 0)


def test_half_second():
    assert unix_ns_to_ntp(500_000_000).fraction == 0x80000000


def test_before_era_overflows():
    with pytest.raises(EraOverflowError):
        unix_ns_to_ntp(-NTP_UNIX_OFFSET * 10**9 - 1)
    with pytest.raises(EraOverflowError):
        unix_ns_to_ntp((2**32 - NTP_UNIX_OFFSET) * 10**9)


def test_sim_advance_one_second():
    tl = SimTimeline(1_700_000_000_123_456_789)
    c = SimClock(tl)
    a = now_ntp(c)
    tl.advance(10**9)
    b = now_ntp(c)
    assert b.seconds == a.seconds + 1 and b.fraction == a.fraction


def test_sim_clock_offset():
    tl = SimTimeline(10**18)
    assert SimClock(tl, 2_000_000).now_ns() - SimClock(tl).now_ns() == 2_000_000


def test_sim_timeline_never_goes_back():
    tl = SimTimeline(100)
    with pytest.raises(ValueError):
        tl.advance_to(99)
    with pytest.raises(ValueError):
        tl.advance(-1)


def test_host_clock_non_decreasing():
    c = HostClock()
    reads = [c.now_ns() for _ in range(10_000)]
    assert reads == sorted(reads)


def test_clock_base_is_abstract():
    with pytest.raises(NotImplementedError):
        Clock().now_ns()


def test_diff_examples():
    b = NtpTimestamp(3_900_000_000, 12345)
    assert ntp_diff(b, b) == 0
    assert ntp_diff(NtpTimestamp(b.seconds + 1, b.fraction), b) == 10**9
    half = NtpTimestamp.from_int(b.to_int() + 0x80000000)
    assert abs(ntp_diff(half, b) - 500_000_000) <= 1


def test_diff_across_wraparound():
    a = NtpTimestamp(0, 0)
    b = NtpTimestamp(2**32 - 1, 0)
    assert ntp_diff(a, b) == 10**9
    assert ntp_diff(b, a) == -10**9


@settings(max_examples=2000)
@given(ERA0)
def test_conversion_matches_oracle(ns):
    t = unix_ns_to_ntp(ns)
    assert (t.seconds, t.fraction) == oracles.unix_ns_to_ntp(ns)


@settings(max_examples=2000)
@given(ERA0)
def test_roundtrip_under_one_ns(ns):
    assert abs(ntp_to_unix_ns(unix_ns_to_ntp(ns)) - ns) < 1


@settings(max_examples=2000)
@given(ntp64, ntp64)
def test_diff_antisymmetric_and_matches_oracle(a, b):
    assert ntp_diff(a, a) == 0
    assert ntp_diff(a, b) == -ntp_diff(b, a)
    assert ntp_diff(a, b) == oracles.ntp_diff_ns(a.to_int(), b.to_int())


@settings(max_examples=1000)
@given(st.integers(0, 10**18), st.integers(0, 10**12))
def test_diff_of_converted_instants(base, delta):
    """Differences of converted instants are exact to within one fraction step."""
    a = unix_ns_to_ntp(base + delta)
    b = unix_ns_to_ntp(base)
    assert abs(ntp_diff(a, b) - delta) <= 1
