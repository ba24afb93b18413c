"""STAMP Session-Reflector."""

from __future__ import annotations

import ipaddress
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

from .codec import (
    PAYLOAD_LEN,
    UDP_HEADER_LEN,
    ErrorEstimate,
    NtpTimestamp,
    ReflectorTestPayload,
    SegmentRoutingHeader,
    TestDatagram,
    build_test_datagram,
    decode_sender_payload,
    parse_udp_datagram,
    udp_offset,
)
from .errors import CodecError, InvalidConfigError, NotUdpError, TransportError
from .node import Discard, DiscardReason, SessionStatus, StampNode
from .sender import ReflectorMode, _addr, _enum, _port, _sids
from .timebase import Clock


@dataclass(frozen=True)
class ReflectorSessionConfig:
    """What a Session-Reflector needs to know about one session.

    Replies go to ``sender_addr`` when set, otherwise to the source address
    of the probe, and always to the probe's source port.  A non-empty
    ``return_sid_list`` is attached as an SRH to enforce the return path.
    """

    ssid: int
    return_sid_list: tuple = ()
    sender_addr: Optional[ipaddress.IPv6Address] = None
    src_addr: Optional[ipaddress.IPv6Address] = None
    reflector_port: Optional[int] = None
    sender_port: Optional[int] = None
    reflector_mode: ReflectorMode = ReflectorMode.STATELESS

    def __post_init__(self):
        s = object.__setattr__
        if not isinstance(self.ssid, int) or isinstance(self.ssid, bool) or not 0 < self.ssid < 65536:
            raise InvalidConfigError(f"{self.ssid!r} must be a nonzero 16-bit integer", field="ssid")
        s(self, "return_sid_list", _sids(self.return_sid_list, "return_sid_list"))
        s(self, "sender_addr", _addr(self.sender_addr, "sender_addr", optional=True))
        s(self, "src_addr", _addr(self.src_addr, "src_addr", optional=True))
        s(self, "reflector_port", _port(self.reflector_port, "reflector_port"))
        s(self, "sender_port", _port(self.sender_port, "sender_port"))
        s(self, "reflector_mode", _enum(ReflectorMode, self.reflector_mode, "reflector_mode"))

    def to_dict(self) -> dict:
        return {
            "ssid": self.ssid,
            "return_sid_list": [str(a) for a in self.return_sid_list],
            "sender_addr": str(self.sender_addr) if self.sender_addr else None,
            "src_addr": str(self.src_addr) if self.src_addr else None,
            "reflector_port": self.reflector_port,
            "sender_port": self.sender_port,
            "reflector_mode": self.reflector_mode.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReflectorSessionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown field(s) {sorted(unknown)}", field="session")
        if "ssid" not in d:
            raise InvalidConfigError("missing", field="ssid")
        return cls(**{k: v for k, v in d.items() if v is not None})


class ReflectorSessionState:
    def __init__(self, config: ReflectorSessionConfig, src_addr, port: int, *,
                 error_estimate: ErrorEstimate = ErrorEstimate(), hop_limit: int = 64):
        self.config = config
        self.src_addr = src_addr
        self.port = port
        self.error_estimate = error_estimate
        self.hop_limit = hop_limit
        self.status = SessionStatus.CREATED
        self.tx_counter = 0
        self.reflected = 0
        self.discards: Counter = Counter()
        self._srh = SegmentRoutingHeader(config.return_sid_list) if config.return_sid_list else None
        self._lock = threading.Lock()

    @property
    def ssid(self) -> int:
        return self.config.ssid

    @property
    def mode(self) -> ReflectorMode:
        return self.config.reflector_mode

    def reflect(self, datagram: bytes, clock: Clock,
                t2: Optional[NtpTimestamp] = None) -> Union[bytes, Discard]:
        """Turn a Session-Sender datagram into the Session-Reflector reply.

        ``t2`` is the receive timestamp; when omitted it is read from
        ``clock`` on entry.  T3 is read just before the reply is encoded.
        """
        if t2 is None:
            t2 = clock.now_ntp()
        try:
            u = parse_udp_datagram(datagram)
        except NotUdpError as exc:
            return self._discard(DiscardReason.NOT_STAMP, str(exc))
        except CodecError as exc:
            return self._discard(DiscardReason.DECODE_ERROR, str(exc))
        if u.dst_port != self.port:
            return self._discard(DiscardReason.NOT_STAMP, "wrong UDP port")
        if len(u.payload) < PAYLOAD_LEN:
            return self._discard(DiscardReason.DECODE_ERROR, f"payload {len(u.payload)} bytes")
        try:
            probe = decode_sender_payload(u.payload)
        except CodecError as exc:
            return self._discard(DiscardReason.DECODE_ERROR, str(exc))
        if probe.ssid != self.config.ssid:
            return self._discard(DiscardReason.WRONG_SSID, f"SSID {probe.ssid}")
        if self.status is not SessionStatus.RUNNING:
            return self._discard(DiscardReason.SESSION_NOT_RUNNING, self.status.value)

        with self._lock:
            if self.mode is ReflectorMode.STATEFUL:
                seq = self.tx_counter
                self.tx_counter = (seq + 1) & 0xFFFFFFFF
            else:
                seq = probe.sequence_number
            self.reflected += 1

        sender = self.config.sender_addr or u.src_addr
        dst = self._srh.segment_list[0] if self._srh is not None else sender
        t3 = clock.now_ntp()
        reply = ReflectorTestPayload.echo(
            probe,
            sequence_number=seq,
            receive_timestamp=t2,
            timestamp=t3,
            sender_ttl=u.hop_limit,
            error_estimate=self.error_estimate,
        )
        return build_test_datagram(TestDatagram(
            src_addr=self.src_addr or u.final_dst,
            dst_addr=dst,
            payload=reply,
            src_port=u.dst_port,
            dst_port=self.config.sender_port or u.src_port,
            hop_limit=self.hop_limit,
            srh=self._srh,
        ))

    def _discard(self, reason, detail):
        self.discards[reason] += 1
        return Discard(reason, detail)

    def describe(self) -> dict:
        return {
            "status": self.status.value,
            "config": self.config.to_dict(),
            "tx_counter": self.tx_counter,
            "reflected": self.reflected,
            "discards": {r.value: n for r, n in sorted(self.discards.items())},
        }


class SessionReflector(StampNode):
    """A Session-Reflector node bound to one transport."""

    role = "reflector"

    def __init__(self, transport, **kw):
        super().__init__(transport, **kw)
        self.reflected = 0
        self.tx_errors = 0

    def _new_state(self, cfg: ReflectorSessionConfig) -> ReflectorSessionState:
        g = self.global_config
        port = cfg.reflector_port or g.stamp_udp_port
        if port != g.stamp_udp_port:
            raise InvalidConfigError(f"must equal the node STAMP port {g.stamp_udp_port}",
                                     field="reflector_port")
        ee = ErrorEstimate(s_bit=self.clock_synchronized, z_bit=False, scale=0, multiplier=1)
        return ReflectorSessionState(cfg, cfg.src_addr or g.src_ipv6, port,
                                     error_estimate=ee, hop_limit=self.hop_limit)

    def _on_datagram(self, datagram: bytes) -> None:
        reply = self.on_receive(datagram)
        if isinstance(reply, bytes):
            try:
                self.transport.send(reply)
            except TransportError:
                self.tx_errors += 1

    def on_receive(self, datagram: bytes) -> Union[bytes, Discard]:
        """Route a probe to its session by SSID and reflect it."""
        t2 = self.clock.now_ntp()
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
        out = state.reflect(datagram, self.clock, t2)
        if isinstance(out, Discard):
            self.discards[out.reason] += 1
        else:
            self.reflected += 1
        return out

    def _discard(self, reason, detail=""):
        self.discards[reason] += 1
        return Discard(reason, detail)

    def processed_count(self) -> int:
        return self.reflected


__all__ = ["ReflectorSessionConfig", "ReflectorSessionState", "SessionReflector"]
