"""STAMP Session-Sender and Collector.

The sender pre-builds one complete test datagram per session when the
session is created.  Each transmission copies that template and patches only
the sequence number, T1 and the UDP checksum; the checksum is updated from a
precomputed one's complement sum of the constant bytes.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import struct
import threading
from collections import Counter, deque
from dataclasses import dataclass
from typing import Optional, Union

from .codec import (
    PAYLOAD_LEN,
    STAMP_PORT,
    ErrorEstimate,
    NtpTimestamp,
    SegmentRoutingHeader,
    SenderTestPayload,
    TestDatagram,
    UDP_HEADER_LEN,
    build_test_datagram,
    decode_reflector_payload,
    fold,
    ipv6,
    ones_sum,
    pseudo_header,
    udp_offset,
)
from .errors import (
    CodecError,
    InvalidConfigError,
    NotRunningError,
    StampError,
    TransportError,
)
from .node import Discard, DiscardReason, NodeGlobalConfig, SessionStatus, StampNode
from .timebase import Clock

log = logging.getLogger(__name__)

DEFAULT_SENDER_PORT = 50001
DEFAULT_QUEUE_SIZE = 65_536
_SEEN_WINDOW = 65_536


class AuthMode(str, enum.Enum):
    UNAUTHENTICATED = "unauthenticated"
    AUTHENTICATED = "authenticated"


class TimestampFormat(str, enum.Enum):
    NTP = "ntp"
    PTPV2 = "ptpv2"


class DelayMode(str, enum.Enum):
    ONE_WAY = "one-way"
    TWO_WAY = "two-way"


class ReflectorMode(str, enum.Enum):
    STATELESS = "stateless"
    STATEFUL = "stateful"


def _enum(kind, value, name):
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(m.value for m in kind)
        raise InvalidConfigError(f"{value!r} not one of {choices}", field=name) from None


def _port(value, name):
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool) or not 0 < value < 65536:
        raise InvalidConfigError(f"{value!r} is not a UDP port", field=name)
    return value


def _addr(value, name, optional=False):
    if value is None:
        if optional:
            return None
        raise InvalidConfigError("missing", field=name)
    try:
        return ipv6(value)
    except ValueError as exc:
        raise InvalidConfigError(str(exc), field=name) from None


def _sids(values, name):
    if values is None:
        return ()
    if isinstance(values, (str, bytes)):
        raise InvalidConfigError("must be a list of IPv6 addresses", field=name)
    sids = tuple(_addr(v, name) for v in values)
    if len(sids) > 16:
        raise InvalidConfigError("at most 16 segments", field=name)
    return sids


@dataclass(frozen=True)
class SessionConfig:
    """The ten per-session parameters a controller supplies to a Session-Sender.

    An empty ``sid_list`` sends plain IPv6 without an SRH.  ``src_addr`` and
    ``sender_port`` default to the node's Init values.
    """

    ssid: int
    reflector_addr: ipaddress.IPv6Address
    sid_list: tuple = ()
    interval_ns: int = 1_000_000_000
    src_addr: Optional[ipaddress.IPv6Address] = None
    auth_mode: AuthMode = AuthMode.UNAUTHENTICATED
    timestamp_format: TimestampFormat = TimestampFormat.NTP
    delay_mode: DelayMode = DelayMode.TWO_WAY
    sender_port: Optional[int] = None
    reflector_port: int = STAMP_PORT
    reflector_mode: ReflectorMode = ReflectorMode.STATELESS

    def __post_init__(self):
        s = object.__setattr__
        if not isinstance(self.ssid, int) or isinstance(self.ssid, bool) or not 0 < self.ssid < 65536:
            raise InvalidConfigError(f"{self.ssid!r} must be a nonzero 16-bit integer", field="ssid")
        s(self, "reflector_addr", _addr(self.reflector_addr, "reflector_addr"))
        s(self, "sid_list", _sids(self.sid_list, "sid_list"))
        if not isinstance(self.interval_ns, int) or isinstance(self.interval_ns, bool) or self.interval_ns <= 0:
            raise InvalidConfigError(f"{self.interval_ns!r} must be a positive integer", field="interval_ns")
        s(self, "src_addr", _addr(self.src_addr, "src_addr", optional=True))
        s(self, "auth_mode", _enum(AuthMode, self.auth_mode, "auth_mode"))
        s(self, "timestamp_format", _enum(TimestampFormat, self.timestamp_format, "timestamp_format"))
        s(self, "delay_mode", _enum(DelayMode, self.delay_mode, "delay_mode"))
        s(self, "sender_port", _port(self.sender_port, "sender_port"))
        s(self, "reflector_port", _port(self.reflector_port, "reflector_port"))
        s(self, "reflector_mode", _enum(ReflectorMode, self.reflector_mode, "reflector_mode"))

    def to_dict(self) -> dict:
        return {
            "ssid": self.ssid,
            "reflector_addr": str(self.reflector_addr),
            "sid_list": [str(a) for a in self.sid_list],
            "interval_ns": self.interval_ns,
            "src_addr": str(self.src_addr) if self.src_addr else None,
            "auth_mode": self.auth_mode.value,
            "timestamp_format": self.timestamp_format.value,
            "delay_mode": self.delay_mode.value,
            "sender_port": self.sender_port,
            "reflector_port": self.reflector_port,
            "reflector_mode": self.reflector_mode.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown field(s) {sorted(unknown)}", field="session")
        if "ssid" not in d:
            raise InvalidConfigError("missing", field="ssid")
        return cls(**{k: v for k, v in d.items() if v is not None or k in ("src_addr", "sender_port")})


@dataclass(frozen=True)
class MeasurementRecord:
    """One reflected probe: the four timestamps plus bookkeeping."""

    ssid: int
    sender_seq: int
    reflector_seq: int
    t1: NtpTimestamp
    t2: NtpTimestamp
    t3: NtpTimestamp
    t4: NtpTimestamp
    sender_ttl: int
    received_at: int  # local clock, ns since the Unix epoch

    def to_dict(self) -> dict:
        return {
            "ssid": self.ssid,
            "sender_seq": self.sender_seq,
            "reflector_seq": self.reflector_seq,
            "t1": f"{self.t1.to_int():016x}",
            "t2": f"{self.t2.to_int():016x}",
            "t3": f"{self.t3.to_int():016x}",
            "t4": f"{self.t4.to_int():016x}",
            "sender_ttl": self.sender_ttl,
            "received_at": self.received_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementRecord":
        ts = {k: NtpTimestamp.from_int(int(d[k], 16)) for k in ("t1", "t2", "t3", "t4")}
        return cls(ssid=d["ssid"], sender_seq=d["sender_seq"], reflector_seq=d["reflector_seq"],
                   sender_ttl=d["sender_ttl"], received_at=d["received_at"], **ts)


class SenderSessionState:
    """Per-session state: packet template, sequence counter and result queue."""

    def __init__(self, config: SessionConfig, src_addr, sender_port: int, *,
                 error_estimate: ErrorEstimate = ErrorEstimate(), hop_limit: int = 64,
                 queue_size: int = DEFAULT_QUEUE_SIZE):
        self.config = config
        self.src_addr = ipv6(src_addr)
        self.sender_port = sender_port
        self.error_estimate = error_estimate
        self.hop_limit = hop_limit
        self.status = SessionStatus.CREATED
        self.next_seq = 0
        self.results: deque = deque()
        self.queue_size = queue_size
        self.overflow = 0
        self.enqueued = 0
        self.fetched = 0
        self.sent = 0
        self.tx_errors = 0
        self.seq_repeats = 0
        self.discards: Counter = Counter()
        self._seen: deque = deque()
        self._seen_set: set = set()
        self._lock = threading.Lock()
        # transmit-loop bookkeeping, owned by SessionSender
        self.timer = None
        self.started_at = 0
        self.duration_ns: Optional[int] = None
        self.remaining: Optional[int] = None
        self._build_template()

    def _build_template(self) -> None:
        cfg = self.config
        srh = SegmentRoutingHeader(cfg.sid_list) if cfg.sid_list else None
        dst = cfg.sid_list[0] if cfg.sid_list else cfg.reflector_addr
        self.template = build_test_datagram(self.datagram_fields(0, NtpTimestamp(0, 0), srh=srh, dst=dst))
        off = udp_offset(self.template)
        self.csum_offset = off + 6
        self.seq_offset = off + UDP_HEADER_LEN
        final = srh.final_segment if srh is not None else dst
        udp = bytearray(self.template[off:])
        udp[6:8] = b"\x00\x00"
        # seq and T1 are zero in the template, so they contribute nothing here
        self._base_sum = ones_sum(bytes(udp), ones_sum(pseudo_header(self.src_addr.packed, final.packed, len(udp))))

    def datagram_fields(self, seq: int, t1: NtpTimestamp, *, srh=None, dst=None) -> TestDatagram:
        """The full-encode description of a packet; used for the template and as an oracle."""
        cfg = self.config
        if srh is None and cfg.sid_list:
            srh = SegmentRoutingHeader(cfg.sid_list)
        if dst is None:
            dst = cfg.sid_list[0] if cfg.sid_list else cfg.reflector_addr
        return TestDatagram(
            src_addr=self.src_addr,
            dst_addr=dst,
            payload=SenderTestPayload(seq, t1, cfg.ssid, self.error_estimate),
            src_port=self.sender_port,
            dst_port=cfg.reflector_port,
            hop_limit=self.hop_limit,
            srh=srh,
        )

    def patch(self, seq: int, t1: NtpTimestamp) -> bytes:
        """Template with sequence number, T1 and checksum filled in."""
        buf = bytearray(self.template)
        sec, frac = t1.seconds, t1.fraction
        struct.pack_into("!III", buf, self.seq_offset, seq, sec, frac)
        acc = (self._base_sum + (seq >> 16) + (seq & 0xFFFF) + (sec >> 16) + (sec & 0xFFFF)
               + (frac >> 16) + (frac & 0xFFFF))
        struct.pack_into("!H", buf, self.csum_offset, (~fold(acc) & 0xFFFF) or 0xFFFF)
        return bytes(buf)

    def next_packet(self, clock: Clock) -> bytes:
        with self._lock:
            if self.status is not SessionStatus.RUNNING:
                raise NotRunningError(f"session {self.config.ssid} is {self.status.value}")
            seq = self.next_seq
            self.next_seq = (seq + 1) & 0xFFFFFFFF
        return self.patch(seq, clock.now_ntp())

    def on_receive(self, datagram: bytes, clock: Clock,
                   t4: Optional[NtpTimestamp] = None) -> Union[MeasurementRecord, Discard]:
        """Validate a reflector datagram and queue its measurement record.

        Checks run cheapest first: port, length, checksum and decode, SSID,
        session status.  ``t4`` may be captured by the caller at hand-off.
        """
        discard = self._validate(datagram)
        if isinstance(discard, Discard):
            self.discards[discard.reason] += 1
            return discard
        p = discard
        if t4 is None:
            t4 = clock.now_ntp()
        rec = MeasurementRecord(
            ssid=p.ssid,
            sender_seq=p.sender_sequence_number,
            reflector_seq=p.sequence_number,
            t1=p.sender_timestamp,
            t2=p.receive_timestamp,
            t3=p.timestamp,
            t4=t4,
            sender_ttl=p.sender_ttl,
            received_at=clock.now_ns(),
        )
        with self._lock:
            if len(self.results) >= self.queue_size:
                self.results.popleft()
                self.overflow += 1
            self.results.append(rec)
            self.enqueued += 1
            seq = p.sender_sequence_number
            if seq in self._seen_set:
                self.seq_repeats += 1
            else:
                self._seen_set.add(seq)
                self._seen.append(seq)
                if len(self._seen) > _SEEN_WINDOW:
                    self._seen_set.discard(self._seen.popleft())
        return rec

    def _validate(self, datagram: bytes):
        try:
            off = udp_offset(datagram)
        except CodecError as exc:
            return Discard(DiscardReason.NOT_STAMP, str(exc))
        if ((datagram[off + 2] << 8) | datagram[off + 3]) != self.sender_port:
            return Discard(DiscardReason.NOT_STAMP, "wrong UDP port")
        payload = datagram[off + UDP_HEADER_LEN:]
        if len(payload) < PAYLOAD_LEN:
            return Discard(DiscardReason.DECODE_ERROR, f"payload {len(payload)} bytes")
        if not _checksum_ok(datagram, off):
            return Discard(DiscardReason.DECODE_ERROR, "bad UDP checksum")
        try:
            p = decode_reflector_payload(payload)
        except CodecError as exc:
            return Discard(DiscardReason.DECODE_ERROR, str(exc))
        if p.ssid != self.config.ssid:
            return Discard(DiscardReason.WRONG_SSID, f"SSID {p.ssid}")
        if self.status is not SessionStatus.RUNNING:
            return Discard(DiscardReason.SESSION_NOT_RUNNING, self.status.value)
        return p

    def fetch_results(self, max_records: Optional[int] = None) -> list:
        """Remove and return up to ``max_records`` oldest records."""
        with self._lock:
            n = len(self.results) if max_records is None else min(max_records, len(self.results))
            out = [self.results.popleft() for _ in range(n)]
            self.fetched += n
        return out

    def describe(self) -> dict:
        return {
            "status": self.status.value,
            "config": self.config.to_dict(),
            "next_seq": self.next_seq,
            "sent": self.sent,
            "enqueued": self.enqueued,
            "fetched": self.fetched,
            "queued": len(self.results),
            "overflow": self.overflow,
            "seq_repeats": self.seq_repeats,
            "tx_errors": self.tx_errors,
            "discards": {r.value: n for r, n in sorted(self.discards.items())},
        }


def _checksum_ok(datagram: bytes, off: int) -> bool:
    if datagram[off + 6] == 0 and datagram[off + 7] == 0:
        return False
    if off > 40:
        final = bytes(datagram[48:64])
    else:
        final = bytes(datagram[24:40])
    udp = datagram[off:]
    acc = ones_sum(pseudo_header(bytes(datagram[8:24]), final, len(udp)))
    return fold(ones_sum(bytes(udp), acc)) == 0xFFFF


class SessionSender(StampNode):
    """A Session-Sender node: session table, transmit loops and collector."""

    role = "sender"

    def __init__(self, transport, *, queue_size: int = DEFAULT_QUEUE_SIZE, **kw):
        super().__init__(transport, **kw)
        self.queue_size = queue_size
        self.processed = 0

    def _new_state(self, cfg: SessionConfig) -> SenderSessionState:
        g = self.global_config
        if cfg.auth_mode is not AuthMode.UNAUTHENTICATED:
            raise InvalidConfigError("only unauthenticated mode is supported", field="auth_mode")
        if cfg.timestamp_format is not TimestampFormat.NTP:
            raise InvalidConfigError("only NTP timestamps are supported", field="timestamp_format")
        port = cfg.sender_port or g.stamp_udp_port
        if port != g.stamp_udp_port:
            raise InvalidConfigError(f"must equal the node STAMP port {g.stamp_udp_port}", field="sender_port")
        ee = ErrorEstimate(s_bit=self.clock_synchronized, z_bit=False, scale=0, multiplier=1)
        return SenderSessionState(cfg, cfg.src_addr or g.src_ipv6, port, error_estimate=ee,
                                  hop_limit=self.hop_limit, queue_size=self.queue_size)

    # -- transmit loop --------------------------------------------------

    def _on_start(self, state, duration_ns, count):
        state.started_at = self.clock.now_ns()
        state.duration_ns = duration_ns
        state.remaining = count
        state.timer = self.transport.call_later(0, lambda: self._tick(state))

    def _on_stop(self, state):
        if state.timer is not None:
            state.timer.cancel()
            state.timer = None

    def _tick(self, state: SenderSessionState) -> None:
        with self._lock:
            if state.status is not SessionStatus.RUNNING:
                return
            now = self.clock.now_ns()
            if state.duration_ns is not None and now - state.started_at >= state.duration_ns:
                state.status = SessionStatus.STOPPED
                state.timer = None
                log.info("session %d reached its duration", state.config.ssid)
                return
            if state.remaining is not None:
                if state.remaining <= 0:
                    state.timer = None
                    return
                state.remaining -= 1
            pkt = state.next_packet(self.clock)
            state.sent += 1
            deadline = state.started_at + state.sent * state.config.interval_ns
            state.timer = self.transport.call_later(deadline - now, lambda: self._tick(state))
        try:
            self.transport.send(pkt)
        except TransportError as exc:
            state.tx_errors += 1
            log.warning("session %d: send failed: %s", state.config.ssid, exc)

    # -- collector ------------------------------------------------------

    def _on_datagram(self, datagram: bytes) -> None:
        self.on_receive(datagram)

    def on_receive(self, datagram: bytes):
        t4 = self.clock.now_ntp()
        try:
            off = udp_offset(datagram)
        except CodecError as exc:
            return self._discard(DiscardReason.NOT_STAMP, str(exc))
        if ((datagram[off + 2] << 8) | datagram[off + 3]) != self.global_config.stamp_udp_port:
            return self._discard(DiscardReason.NOT_STAMP, "wrong UDP port")
        if len(datagram) - off - UDP_HEADER_LEN < PAYLOAD_LEN:
            return self._discard(DiscardReason.DECODE_ERROR, "short payload")
        ssid = (datagram[off + 22] << 8) | datagram[off + 23]
        state = self.sessions.get(ssid)
        if state is None:
            return self._discard(DiscardReason.WRONG_SSID, f"SSID {ssid}")
        result = state.on_receive(datagram, self.clock, t4)
        if isinstance(result, Discard):
            self.discards[result.reason] += 1
        else:
            self.processed += 1
        return result

    def _discard(self, reason, detail=""):
        self.discards[reason] += 1
        return Discard(reason, detail)

    def fetch_results(self, ssid: int, max_records: Optional[int] = None) -> list:
        return self._get(ssid).fetch_results(max_records)

    def processed_count(self) -> int:
        return self.processed


__all__ = [
    "AuthMode", "DelayMode", "MeasurementRecord", "NodeGlobalConfig", "ReflectorMode",
    "SenderSessionState", "SessionConfig", "SessionSender", "StampError", "TimestampFormat",
]
