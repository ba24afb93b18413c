"""Wire codecs for STAMP unauthenticated test packets carried over IPv6/SRH/UDP.

Everything is big-endian.  Payload layouts (44 bytes each)::

    Session-Sender                     Session-Reflector
    0   Sequence Number (4)            0   Sequence Number (4)
    4   Timestamp T1 (8)               4   Timestamp T3 (8)
    12  Error Estimate (2)             12  Error Estimate (2)
    14  SSID (2)                       14  SSID (2)
    16  MBZ (28)                       16  Receive Timestamp T2 (8)
                                       24  Session-Sender Sequence Number (4)
                                       28  Session-Sender Timestamp T1 (8)
                                       36  Session-Sender Error Estimate (2)
                                       38  MBZ (2)
                                       40  Session-Sender TTL (1)
                                       41  MBZ (3)

Encoders are strict; decoders accept nonzero MBZ bytes and report them
through the ``mbz_nonzero`` attribute.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import (
    BadErrorEstimateError,
    ChecksumMismatchError,
    EmptySegmentListError,
    FieldRangeError,
    LengthMismatchError,
    NotUdpError,
    SsidZeroError,
    TooShortError,
)

STAMP_PORT = 862
PAYLOAD_LEN = 44
MAX_SEGMENTS = 16

IPV6_HEADER_LEN = 40
UDP_HEADER_LEN = 8
SRH_FIXED_LEN = 8
IPPROTO_ROUTING = 43
IPPROTO_UDP = 17
SRH_ROUTING_TYPE = 4
DEFAULT_HOP_LIMIT = 64

SENDER_TTL_OFFSET = 40

_SENDER = struct.Struct("!IIIHH28x")
_REFLECTOR = struct.Struct("!IIIHHIIIIIH2xB3x")
_IPV6 = struct.Struct("!IHBB16s16s")
_UDP = struct.Struct("!HHHH")
_SRH = struct.Struct("!BBBBBBH")

assert _SENDER.size == _REFLECTOR.size == PAYLOAD_LEN

IPv6Like = Union[str, bytes, ipaddress.IPv6Address]


def ipv6(addr: IPv6Like) -> ipaddress.IPv6Address:
    """Coerce a string, 16 packed bytes or an address object to IPv6Address."""
    if isinstance(addr, ipaddress.IPv6Address):
        return addr
    return ipaddress.IPv6Address(addr)


def _check_uint(name, value, bits):
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < (1 << bits):
        raise FieldRangeError(f"{name}={value!r} does not fit in unsigned {bits} bits")


# -- timestamps and error estimate ----------------------------------------

@dataclass(frozen=True, slots=True)
class NtpTimestamp:
    """64-bit NTP timestamp: seconds since 1900-01-01 and a 2^-32 s fraction."""

    seconds: int = 0
    fraction: int = 0

    def __post_init__(self):
        _check_uint("seconds", self.seconds, 32)
        _check_uint("fraction", self.fraction, 32)

    def to_int(self) -> int:
        return (self.seconds << 32) | self.fraction

    @classmethod
    def from_int(cls, value: int) -> "NtpTimestamp":
        _check_uint("timestamp", value, 64)
        return cls(value >> 32, value & 0xFFFFFFFF)

    def to_bytes(self) -> bytes:
        return self.to_int().to_bytes(8, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "NtpTimestamp":
        if len(data) < 8:
            raise TooShortError(f"timestamp needs 8 bytes, got {len(data)}")
        return cls.from_int(int.from_bytes(data[:8], "big"))


@dataclass(frozen=True, slots=True)
class ErrorEstimate:
    """16-bit Error Estimate: S | Z | Scale(6) | Multiplier(8)."""

    s_bit: bool = False
    z_bit: bool = False
    scale: int = 0
    multiplier: int = 1

    def __post_init__(self):
        _check_uint("scale", self.scale, 6)
        _check_uint("multiplier", self.multiplier, 8)

    def to_int(self) -> int:
        if self.multiplier == 0:
            raise BadErrorEstimateError("error estimate multiplier must be nonzero")
        return (self.s_bit << 15) | (self.z_bit << 14) | (self.scale << 8) | self.multiplier

    @classmethod
    def from_int(cls, value: int) -> "ErrorEstimate":
        return cls(
            s_bit=bool(value & 0x8000),
            z_bit=bool(value & 0x4000),
            scale=(value >> 8) & 0x3F,
            multiplier=value & 0xFF,
        )


# -- payloads ---------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SenderTestPayload:
    sequence_number: int
    timestamp: NtpTimestamp
    ssid: int
    error_estimate: ErrorEstimate = ErrorEstimate()
    mbz_nonzero: bool = field(default=False, compare=False)

    def __post_init__(self):
        _check_uint("sequence_number", self.sequence_number, 32)
        _check_uint("ssid", self.ssid, 16)


@dataclass(frozen=True, slots=True)
class ReflectorTestPayload:
    sequence_number: int
    timestamp: NtpTimestamp
    receive_timestamp: NtpTimestamp
    ssid: int
    sender_sequence_number: int
    sender_timestamp: NtpTimestamp
    sender_ttl: int
    error_estimate: ErrorEstimate = ErrorEstimate()
    sender_error_estimate: ErrorEstimate = ErrorEstimate()
    mbz_nonzero: bool = field(default=False, compare=False)

    def __post_init__(self):
        _check_uint("sequence_number", self.sequence_number, 32)
        _check_uint("ssid", self.ssid, 16)
        _check_uint("sender_sequence_number", self.sender_sequence_number, 32)
        _check_uint("sender_ttl", self.sender_ttl, 8)

    @classmethod
    def echo(cls, sent: SenderTestPayload, *, sequence_number, receive_timestamp,
             timestamp, sender_ttl, error_estimate=ErrorEstimate()) -> "ReflectorTestPayload":
        """Build a reply that copies the sender fields bit-for-bit."""
        return cls(
            sequence_number=sequence_number,
            timestamp=timestamp,
            receive_timestamp=receive_timestamp,
            ssid=sent.ssid,
            sender_sequence_number=sent.sequence_number,
            sender_timestamp=sent.timestamp,
            sender_ttl=sender_ttl,
            error_estimate=error_estimate,
            sender_error_estimate=sent.error_estimate,
        )


def encode_sender_payload(p: SenderTestPayload) -> bytes:
    if p.ssid == 0:
        raise SsidZeroError("SSID must be nonzero")
    return _SENDER.pack(p.sequence_number, p.timestamp.seconds, p.timestamp.fraction,
                        p.error_estimate.to_int(), p.ssid)


def decode_sender_payload(data: bytes) -> SenderTestPayload:
    if len(data) < PAYLOAD_LEN:
        raise TooShortError(f"sender payload needs {PAYLOAD_LEN} bytes, got {len(data)}")
    seq, sec, frac, ee, ssid = _SENDER.unpack_from(data)
    if ssid == 0:
        raise SsidZeroError("SSID must be nonzero")
    mbz = any(data[16:PAYLOAD_LEN])
    return SenderTestPayload(seq, NtpTimestamp(sec, frac), ssid, ErrorEstimate.from_int(ee), mbz)


def encode_reflector_payload(p: ReflectorTestPayload) -> bytes:
    if p.ssid == 0:
        raise SsidZeroError("SSID must be nonzero")
    return _REFLECTOR.pack(
        p.sequence_number, p.timestamp.seconds, p.timestamp.fraction,
        p.error_estimate.to_int(), p.ssid,
        p.receive_timestamp.seconds, p.receive_timestamp.fraction,
        p.sender_sequence_number, p.sender_timestamp.seconds, p.sender_timestamp.fraction,
        p.sender_error_estimate.to_int(), p.sender_ttl,
    )


def decode_reflector_payload(data: bytes) -> ReflectorTestPayload:
    if len(data) < PAYLOAD_LEN:
        raise TooShortError(f"reflector payload needs {PAYLOAD_LEN} bytes, got {len(data)}")
    (seq, t3s, t3f, ee, ssid, t2s, t2f, sseq, t1s, t1f, see, ttl) = _REFLECTOR.unpack_from(data)
    if ssid == 0:
        raise SsidZeroError("SSID must be nonzero")
    mbz = any(data[38:40]) or any(data[41:PAYLOAD_LEN])
    return ReflectorTestPayload(
        sequence_number=seq,
        timestamp=NtpTimestamp(t3s, t3f),
        receive_timestamp=NtpTimestamp(t2s, t2f),
        ssid=ssid,
        sender_sequence_number=sseq,
        sender_timestamp=NtpTimestamp(t1s, t1f),
        sender_ttl=ttl,
        error_estimate=ErrorEstimate.from_int(ee),
        sender_error_estimate=ErrorEstimate.from_int(see),
        mbz_nonzero=mbz,
    )


# -- segment routing header -------------------------------------------------

@dataclass(frozen=True, slots=True)
class SegmentRoutingHeader:
    """SRv6 routing header (type 4) without TLVs.

    ``segment_list`` is in path order: the first element is the first
    segment visited.  On the wire the list is reversed, so Segment List[0]
    is the final segment.
    """

    segment_list: tuple
    segments_left: Optional[int] = None
    next_header: int = IPPROTO_UDP
    flags: int = 0
    tag: int = 0

    def __post_init__(self):
        segs = tuple(ipv6(s) for s in self.segment_list)
        object.__setattr__(self, "segment_list", segs)
        if not segs:
            raise EmptySegmentListError("SRH needs at least one segment")
        if len(segs) > MAX_SEGMENTS:
            raise FieldRangeError(f"SRH carries at most {MAX_SEGMENTS} segments, got {len(segs)}")
        if self.segments_left is None:
            object.__setattr__(self, "segments_left", len(segs) - 1)
        _check_uint("segments_left", self.segments_left, 8)
        if self.segments_left > len(segs) - 1:
            raise FieldRangeError("segments_left exceeds last_entry")
        _check_uint("next_header", self.next_header, 8)
        _check_uint("flags", self.flags, 8)
        _check_uint("tag", self.tag, 16)

    @property
    def last_entry(self) -> int:
        return len(self.segment_list) - 1

    @property
    def hdr_ext_len(self) -> int:
        return 2 * len(self.segment_list)

    @property
    def final_segment(self) -> ipaddress.IPv6Address:
        return self.segment_list[-1]

    @property
    def active_segment(self) -> ipaddress.IPv6Address:
        return self.segment_list[len(self.segment_list) - 1 - self.segments_left]

    def __len__(self) -> int:
        return SRH_FIXED_LEN + 16 * len(self.segment_list)


def encode_srh(srh: SegmentRoutingHeader) -> bytes:
    head = _SRH.pack(srh.next_header, srh.hdr_ext_len, SRH_ROUTING_TYPE, srh.segments_left,
                     srh.last_entry, srh.flags, srh.tag)
    return head + b"".join(s.packed for s in reversed(srh.segment_list))


def decode_srh(data: bytes) -> SegmentRoutingHeader:
    if len(data) < SRH_FIXED_LEN:
        raise TooShortError(f"SRH needs {SRH_FIXED_LEN} bytes, got {len(data)}")
    nh, ext_len, rtype, left, last, flags, tag = _SRH.unpack_from(data)
    if rtype != SRH_ROUTING_TYPE:
        raise NotUdpError(f"routing type {rtype} is not SRH")
    if ext_len != 2 * (last + 1):
        raise LengthMismatchError(f"hdr_ext_len {ext_len} inconsistent with last_entry {last}")
    total = SRH_FIXED_LEN + 8 * ext_len
    if len(data) < total:
        raise TooShortError(f"SRH declares {total} bytes, got {len(data)}")
    if left > last:
        raise LengthMismatchError(f"segments_left {left} exceeds last_entry {last}")
    wire = [ipaddress.IPv6Address(bytes(data[8 + 16 * i:24 + 16 * i])) for i in range(last + 1)]
    return SegmentRoutingHeader(tuple(reversed(wire)), left, nh, flags, tag)


# -- checksum ---------------------------------------------------------------

def ones_sum(data: bytes, acc: int = 0) -> int:
    """Unfolded one's complement accumulation of 16-bit big-endian words."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    return acc + sum(struct.unpack(f"!{len(data) // 2}H", data))


def fold(acc: int) -> int:
    while acc >> 16:
        acc = (acc & 0xFFFF) + (acc >> 16)
    return acc


def pseudo_header(src: bytes, dst: bytes, upper_len: int, proto: int = IPPROTO_UDP) -> bytes:
    return src + dst + struct.pack("!IxxxB", upper_len, proto)


def udp_checksum(src: IPv6Like, dst: IPv6Like, udp_segment: bytes) -> int:
    """Checksum of a UDP segment whose checksum field is zero.

    ``dst`` must be the final destination (the last SRH segment when
    present), which is what the receiver will verify against.
    """
    acc = ones_sum(pseudo_header(ipv6(src).packed, ipv6(dst).packed, len(udp_segment)))
    csum = ~fold(ones_sum(udp_segment, acc)) & 0xFFFF
    return csum or 0xFFFF


# -- full datagram ----------------------------------------------------------

@dataclass(frozen=True, slots=True)
class UdpDatagram:
    """An IPv6 (+SRH) + UDP datagram with an opaque payload."""

    src_addr: ipaddress.IPv6Address
    dst_addr: ipaddress.IPv6Address
    payload: bytes
    src_port: int
    dst_port: int = STAMP_PORT
    hop_limit: int = DEFAULT_HOP_LIMIT
    srh: Optional[SegmentRoutingHeader] = None
    traffic_class: int = 0
    flow_label: int = 0
    checksum: Optional[int] = field(default=None, compare=False)
    checksum_ok: bool = field(default=True, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "src_addr", ipv6(self.src_addr))
        object.__setattr__(self, "dst_addr", ipv6(self.dst_addr))
        _check_uint("src_port", self.src_port, 16)
        _check_uint("dst_port", self.dst_port, 16)
        _check_uint("hop_limit", self.hop_limit, 8)
        _check_uint("traffic_class", self.traffic_class, 8)
        _check_uint("flow_label", self.flow_label, 20)

    @property
    def final_dst(self) -> ipaddress.IPv6Address:
        return self.srh.final_segment if self.srh is not None else self.dst_addr


def build_udp_datagram(d: UdpDatagram) -> bytes:
    udp_len = UDP_HEADER_LEN + len(d.payload)
    udp = _UDP.pack(d.src_port, d.dst_port, udp_len, 0) + bytes(d.payload)
    csum = udp_checksum(d.src_addr, d.final_dst, udp)
    udp = udp[:6] + csum.to_bytes(2, "big") + udp[8:]
    if d.srh is not None:
        if d.srh.next_header != IPPROTO_UDP:
            raise FieldRangeError("SRH next_header must be UDP for a test datagram")
        ext = encode_srh(d.srh)
        next_header = IPPROTO_ROUTING
    else:
        ext = b""
        next_header = IPPROTO_UDP
    vtf = (6 << 28) | (d.traffic_class << 20) | d.flow_label
    ip = _IPV6.pack(vtf, len(ext) + udp_len, next_header, d.hop_limit,
                    d.src_addr.packed, d.dst_addr.packed)
    return ip + ext + udp


def udp_offset(data: bytes) -> int:
    """Offset of the UDP header, or raise if the datagram is not IPv6(+SRH)/UDP."""
    if len(data) < IPV6_HEADER_LEN + UDP_HEADER_LEN:
        raise TooShortError(f"datagram too short ({len(data)} bytes)")
    if data[0] >> 4 != 6:
        raise NotUdpError("not an IPv6 packet")
    nh = data[6]
    off = IPV6_HEADER_LEN
    if nh == IPPROTO_ROUTING:
        if len(data) < off + SRH_FIXED_LEN:
            raise TooShortError("truncated routing header")
        nh = data[off]
        off += SRH_FIXED_LEN + 8 * data[off + 1]
    if nh != IPPROTO_UDP:
        raise NotUdpError(f"next header {nh} is not UDP")
    if len(data) < off + UDP_HEADER_LEN:
        raise TooShortError("truncated UDP header")
    return off


def peek_udp(data: bytes):
    """Cheap classifier used by transport filters.

    Returns ``(final_dst_packed, dst_port)`` or None when the datagram is not
    IPv6(+SRH)/UDP.  Never raises.
    """
    try:
        off = udp_offset(data)
    except Exception:
        return None
    if off > IPV6_HEADER_LEN:
        # Segment List[0] on the wire is the final segment.
        final = bytes(data[IPV6_HEADER_LEN + 8:IPV6_HEADER_LEN + 24])
        if len(final) != 16:
            return None
    else:
        final = bytes(data[24:40])
    return final, (data[off + 2] << 8) | data[off + 3]


def parse_udp_datagram(data: bytes, verify: bool = True) -> UdpDatagram:
    """Parse an IPv6(+SRH)/UDP datagram.

    With ``verify`` a bad checksum raises ChecksumMismatchError carrying the
    parsed datagram; otherwise ``checksum_ok`` reports it.
    """
    data = bytes(data)
    off = udp_offset(data)
    vtf, plen, nh, hop, src, dst = _IPV6.unpack_from(data)
    if IPV6_HEADER_LEN + plen != len(data):
        raise LengthMismatchError(f"IPv6 payload length {plen} disagrees with {len(data) - 40} bytes")
    srh = decode_srh(data[IPV6_HEADER_LEN:off]) if nh == IPPROTO_ROUTING else None
    sport, dport, ulen, csum = _UDP.unpack_from(data, off)
    if ulen != len(data) - off:
        raise LengthMismatchError(f"UDP length {ulen} disagrees with {len(data) - off} bytes")
    final = srh.final_segment.packed if srh is not None else dst
    acc = ones_sum(pseudo_header(src, final, ulen))
    ok = csum != 0 and fold(ones_sum(data[off:], acc)) == 0xFFFF
    d = UdpDatagram(
        src_addr=ipaddress.IPv6Address(src),
        dst_addr=ipaddress.IPv6Address(dst),
        payload=data[off + UDP_HEADER_LEN:],
        src_port=sport,
        dst_port=dport,
        hop_limit=hop,
        srh=srh,
        traffic_class=(vtf >> 20) & 0xFF,
        flow_label=vtf & 0xFFFFF,
        checksum=csum,
        checksum_ok=ok,
    )
    if verify and not ok:
        raise ChecksumMismatchError(f"UDP checksum 0x{csum:04x} does not verify", datagram=d)
    return d


# -- STAMP test datagrams ---------------------------------------------------

Payload = Union[SenderTestPayload, ReflectorTestPayload]


@dataclass(frozen=True, slots=True)
class TestDatagram:
    """A STAMP test packet with its full IPv6/SRH/UDP header chain."""

    __test__ = False  # keep pytest from collecting this class

    src_addr: ipaddress.IPv6Address
    dst_addr: ipaddress.IPv6Address
    payload: Payload
    src_port: int
    dst_port: int = STAMP_PORT
    hop_limit: int = DEFAULT_HOP_LIMIT
    srh: Optional[SegmentRoutingHeader] = None

    def __post_init__(self):
        object.__setattr__(self, "src_addr", ipv6(self.src_addr))
        object.__setattr__(self, "dst_addr", ipv6(self.dst_addr))
        if self.dst_port is None:
            object.__setattr__(self, "dst_port", STAMP_PORT)


def encode_payload(p: Payload) -> bytes:
    if isinstance(p, SenderTestPayload):
        return encode_sender_payload(p)
    return encode_reflector_payload(p)


def build_test_datagram(d: TestDatagram) -> bytes:
    return build_udp_datagram(UdpDatagram(
        src_addr=d.src_addr,
        dst_addr=d.dst_addr,
        payload=encode_payload(d.payload),
        src_port=d.src_port,
        dst_port=d.dst_port,
        hop_limit=d.hop_limit,
        srh=d.srh,
    ))


def parse_test_datagram(data: bytes, payload_type=SenderTestPayload, verify: bool = True) -> TestDatagram:
    """Inverse of build_test_datagram.

    ``payload_type`` selects the payload decoder since the two layouts are
    indistinguishable on the wire.
    """
    try:
        u = parse_udp_datagram(data, verify=verify)
    except ChecksumMismatchError as exc:
        exc.datagram = _as_test_datagram(exc.datagram, payload_type)
        raise
    return _as_test_datagram(u, payload_type)


def _as_test_datagram(u: UdpDatagram, payload_type) -> TestDatagram:
    if payload_type is ReflectorTestPayload:
        payload = decode_reflector_payload(u.payload)
    else:
        payload = decode_sender_payload(u.payload)
    return TestDatagram(u.src_addr, u.dst_addr, payload, u.src_port, u.dst_port, u.hop_limit, u.srh)
