"""Clocks that hand out NTP timestamps.

Instants are integer nanoseconds since the Unix epoch.  A clock adds its
``offset_ns`` to the true instant, which is how tests model a Session-Reflector
whose clock is not synchronized with the Session-Sender.
"""

from __future__ import annotations

import threading
import time

from .codec import NtpTimestamp
from .errors import EraOverflowError

NTP_UNIX_OFFSET = 2_208_988_800  # seconds from 1900-01-01 to 1970-01-01
NS_PER_S = 1_000_000_000
_FRAC = 1 << 32


def unix_ns_to_ntp(unix_ns: int) -> NtpTimestamp:
    """Convert a Unix instant to NTP era 0, truncating the fraction."""
    sec, rem = divmod(unix_ns, NS_PER_S)
    sec += NTP_UNIX_OFFSET
    if not 0 <= sec < _FRAC:
        raise EraOverflowError(f"instant {unix_ns} ns falls outside NTP era 0")
    return NtpTimestamp(sec, (rem << 32) // NS_PER_S)


def ntp_to_unix_ns(ts: NtpTimestamp) -> int:
    """Inverse of unix_ns_to_ntp, rounding the fraction to the nearest ns."""
    return (ts.seconds - NTP_UNIX_OFFSET) * NS_PER_S + ((ts.fraction * NS_PER_S + (1 << 31)) >> 32)


def ntp_diff(a: NtpTimestamp, b: NtpTimestamp) -> int:
    """Signed ``a - b`` in nanoseconds.

    The difference is taken modulo 2^64 and read as a signed 64-bit value, so
    it stays correct across the seconds wraparound.  Rounding is symmetric,
    which keeps ``ntp_diff(a, b) == -ntp_diff(b, a)``.
    """
    d = (a.to_int() - b.to_int()) & 0xFFFFFFFFFFFFFFFF
    if d >> 63:
        d -= 1 << 64
    mag = (abs(d) * NS_PER_S + (1 << 31)) >> 32
    return mag if d >= 0 else -mag


class Clock:
    """Base clock.  Subclasses provide ``_true_ns``."""

    source = "abstract"

    def __init__(self, offset_ns: int = 0):
        self.offset_ns = int(offset_ns)

    def _true_ns(self) -> int:
        raise NotImplementedError

    def now_ns(self) -> int:
        return self._true_ns() + self.offset_ns

    def now_ntp(self) -> NtpTimestamp:
        return unix_ns_to_ntp(self.now_ns())


class HostClock(Clock):
    """Wall clock of the host, made non-decreasing across reads."""

    source = "host"

    def __init__(self, offset_ns: int = 0):
        super().__init__(offset_ns)
        self._last = 0
        self._lock = threading.Lock()

    def _true_ns(self) -> int:
        t = time.time_ns()
        with self._lock:
            if t < self._last:
                t = self._last
            self._last = t
        return t


class SimTimeline:
    """Shared simulated 'true time'.  Only the scheduler advances it."""

    def __init__(self, start_ns: int = 0):
        self.now_ns = int(start_ns)

    def advance(self, delta_ns: int) -> None:
        if delta_ns < 0:
            raise ValueError("simulated time cannot go backwards")
        self.now_ns += int(delta_ns)

    def advance_to(self, t_ns: int) -> None:
        if t_ns < self.now_ns:
            raise ValueError(f"simulated time cannot go backwards ({t_ns} < {self.now_ns})")
        self.now_ns = int(t_ns)


class SimClock(Clock):
    """Reads a SimTimeline, optionally offset.

    Several clocks may share one timeline; each endpoint of a simulated
    network gets its own SimClock so it can carry its own skew.
    """

    source = "simulated"

    def __init__(self, timeline: SimTimeline | None = None, offset_ns: int = 0):
        super().__init__(offset_ns)
        self.timeline = timeline if timeline is not None else SimTimeline()

    def _true_ns(self) -> int:
        return self.timeline.now_ns

    def advance(self, delta_ns: int) -> None:
        self.timeline.advance(delta_ns)


def now_ntp(clock: Clock) -> NtpTimestamp:
    return clock.now_ntp()
