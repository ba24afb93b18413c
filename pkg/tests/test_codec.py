import ipaddress
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from srv6stamp.codec import (
    PAYLOAD_LEN, ErrorEstimate, NtpTimestamp, ReflectorTestPayload, SegmentRoutingHeader,
    SenderTestPayload, TestDatagram, build_test_datagram, decode_reflector_payload,
    decode_sender_payload, decode_srh, encode_reflector_payload, encode_sender_payload, encode_srh,
    parse_test_datagram, parse_udp_datagram, peek_udp,
)
from srv6stamp.errors import (
    BadErrorEstimateError, ChecksumMismatchError, CodecError, EmptySegmentListError,
    FieldRangeError, LengthMismatchError, SsidZeroError, TooShortError,
)

VECTORS = json.loads((Path(__file__).parent.parent / "vectors" / "stamp_vectors.json").read_text())["vectors"]

u32 = st.integers(0, 2**32 - 1)
u16nz = st.integers(1, 2**16 - 1)
timestamps = st.builds(NtpTimestamp, u32, u32)
estimates = st.builds(ErrorEstimate, st.booleans(), st.booleans(), st.integers(0, 63), st.integers(1, 255))
sender_payloads = st.builds(SenderTestPayload, u32, timestamps, u16nz, estimates)
reflector_payloads = st.builds(ReflectorTestPayload, u32, timestamps, timestamps, u16nz, u32, timestamps,
                               st.integers(0, 255), estimates, estimates)
addrs = st.integers(0, 2**128 - 1).map(ipaddress.IPv6Address)
srhs = st.lists(addrs, min_size=1, max_size=16).flatmap(
    lambda segs: st.builds(SegmentRoutingHeader, st.just(tuple(segs)), st.integers(0, len(segs) - 1),
                           st.just(17), st.integers(0, 255), st.integers(0, 65535)))


def _ts(d):
    return NtpTimestamp(d["seconds"], d["fraction"])


def _ee(d):
    return ErrorEstimate(d["s_bit"], d["z_bit"], d["scale"], d["multiplier"])


def _by_kind(kind):
    return [pytest.param(v, id=v["name"]) for v in VECTORS if v["kind"] == kind]


# -- golden vectors -----------------------------------------------------------

@pytest.mark.parametrize("v", _by_kind("sender_payload"))
def test_sender_vector(v):
    raw = bytes.fromhex(v["hex"])
    f = v["fields"]
    p = decode_sender_payload(raw)
    assert p.sequence_number == f["sequence_number"]
    assert p.timestamp == _ts(f["timestamp"])
    assert p.error_estimate == _ee(f["error_estimate"])
    assert p.ssid == f["ssid"]
    assert p.mbz_nonzero == f["mbz_nonzero"]
    if not f["mbz_nonzero"]:
        assert encode_sender_payload(p) == raw


@pytest.mark.parametrize("v", _by_kind("reflector_payload"))
def test_reflector_vector(v):
    raw = bytes.fromhex(v["hex"])
    f = v["fields"]
    p = decode_reflector_payload(raw)
    assert p.sequence_number == f["sequence_number"]
    assert p.timestamp == _ts(f["timestamp"])
    assert p.receive_timestamp == _ts(f["receive_timestamp"])
    assert p.error_estimate == _ee(f["error_estimate"])
    assert p.ssid == f["ssid"]
    assert p.sender_sequence_number == f["sender_sequence_number"]
    assert p.sender_timestamp == _ts(f["sender_timestamp"])
    assert p.sender_error_estimate == _ee(f["sender_error_estimate"])
    assert p.sender_ttl == f["sender_ttl"]
    assert encode_reflector_payload(p) == raw
    for off, byte in v.get("checks", {}).items():
        assert raw[int(off.split("_")[1])] == int(byte, 16)


@pytest.mark.parametrize("v", _by_kind("srh"))
def test_srh_vector(v):
    raw = bytes.fromhex(v["hex"])
    f = v["fields"]
    s = decode_srh(raw)
    assert [str(a) for a in s.segment_list] == f["segment_list"]
    assert s.segments_left == f["segments_left"]
    assert s.last_entry == f["last_entry"]
    assert s.hdr_ext_len == f["hdr_ext_len"] == raw[1]
    assert s.tag == f["tag"] and s.flags == f["flags"] and s.next_header == f["next_header"]
    assert encode_srh(s) == raw


@pytest.mark.parametrize("v", _by_kind("sender_datagram") + _by_kind("reflector_datagram"))
def test_datagram_vector(v):
    raw = bytes.fromhex(v["hex"])
    f = v["fields"]
    kind = ReflectorTestPayload if v["kind"] == "reflector_datagram" else SenderTestPayload
    d = parse_test_datagram(raw, kind)
    assert len(raw) == f["length"]
    assert str(d.src_addr) == f["src_addr"] and str(d.dst_addr) == f["dst_addr"]
    assert (d.src_port, d.dst_port, d.hop_limit) == (f["src_port"], f["dst_port"], f["hop_limit"])
    assert (None if d.srh is None else [str(a) for a in d.srh.segment_list]) == f["srh"]
    assert parse_udp_datagram(raw).checksum == f["checksum"]
    for k, want in f["payload"].items():
        got = getattr(d.payload, k)
        if k == "timestamp":
            want = _ts(want)
        elif k == "error_estimate":
            want = _ee(want)
        assert got == want
    assert build_test_datagram(d) == raw


@pytest.mark.parametrize("v", _by_kind("error_estimate"))
def test_error_estimate_vector(v):
    word = int(v["hex"], 16)
    assert ErrorEstimate.from_int(word) == _ee(v["fields"])
    assert _ee(v["fields"]).to_int() == word


def test_vectors_are_frozen():
    """The generator must reproduce the committed file byte for byte."""
    import subprocess
    import sys
    root = Path(__file__).parent.parent
    out = subprocess.run([sys.executable, str(root / "vectors" / "generate.py")],
                         capture_output=True, text=True, check=True).stdout
    assert out == (root / "vectors" / "stamp_vectors.json").read_text()


# -- examples and errors ------------------------------------------------------

def test_sender_baseline_bytes():
    raw = encode_sender_payload(SenderTestPayload(0, NtpTimestamp(0, 0), 1, ErrorEstimate(False, False, 0, 1)))
    assert raw == bytes.fromhex("00000000" "00000000" "00000000" "0001" "0001") + bytes(28)


def test_ssid_zero_rejected():
    with pytest.raises(SsidZeroError):
        encode_sender_payload(SenderTestPayload(7, NtpTimestamp(), 0))
    with pytest.raises(SsidZeroError):
        decode_sender_payload(bytes(44))
    with pytest.raises(SsidZeroError):
        encode_reflector_payload(ReflectorTestPayload(0, NtpTimestamp(), NtpTimestamp(), 0, 0, NtpTimestamp(), 1))


def test_multiplier_zero_rejected_on_encode():
    with pytest.raises(BadErrorEstimateError):
        encode_sender_payload(SenderTestPayload(0, NtpTimestamp(), 1, ErrorEstimate(multiplier=0)))
    # decoders stay tolerant
    raw = bytearray(encode_sender_payload(SenderTestPayload(0, NtpTimestamp(), 1)))
    raw[13] = 0
    assert decode_sender_payload(bytes(raw)).error_estimate.multiplier == 0


def test_too_short():
    good = encode_sender_payload(SenderTestPayload(0, NtpTimestamp(), 1))
    with pytest.raises(TooShortError):
        decode_sender_payload(good[:43])
    with pytest.raises(TooShortError):
        decode_reflector_payload(good[:20])
    with pytest.raises(TooShortError):
        decode_srh(b"\x11\x02\x04")


def test_field_ranges():
    with pytest.raises(FieldRangeError):
        NtpTimestamp(2**32, 0)
    with pytest.raises(FieldRangeError):
        ErrorEstimate(scale=64)
    with pytest.raises(FieldRangeError):
        SenderTestPayload(-1, NtpTimestamp(), 1)


def test_mbz_flagged_by_mutation():
    raw = bytearray.fromhex(next(v["hex"] for v in VECTORS if v["name"] == "sender-baseline"))
    for i in range(16, 44):
        m = bytearray(raw)
        m[i] = 0xFF
        assert decode_sender_payload(bytes(m)).mbz_nonzero


def test_srh_errors():
    with pytest.raises(EmptySegmentListError):
        SegmentRoutingHeader(())
    with pytest.raises(FieldRangeError):
        SegmentRoutingHeader(tuple(f"fc00::{i}" for i in range(17)))
    with pytest.raises(FieldRangeError):
        SegmentRoutingHeader(("fc00::1",), segments_left=1)
    raw = bytearray(encode_srh(SegmentRoutingHeader(("fc00::1", "fc00::2"))))
    raw[1] = 6
    with pytest.raises(LengthMismatchError):
        decode_srh(bytes(raw))


def test_srh_two_segment_lengths():
    s = SegmentRoutingHeader(("fc00::a", "fc00::b"), 1)
    assert (s.hdr_ext_len, s.last_entry, len(encode_srh(s))) == (4, 1, 40)


def test_datagram_lengths():
    p = SenderTestPayload(0, NtpTimestamp(), 42)
    assert len(build_test_datagram(TestDatagram("fc00::1", "fc00::2", p, 50001))) == 92
    srh = SegmentRoutingHeader(("fc00::a", "fc00::2"))
    assert len(build_test_datagram(TestDatagram("fc00::1", "fc00::a", p, 50001, srh=srh))) == 132


def test_dst_port_defaults_to_862():
    d = TestDatagram("fc00::1", "fc00::2", SenderTestPayload(0, NtpTimestamp(), 1), 5000, None)
    assert d.dst_port == 862


def test_checksum_mismatch_surfaces_packet():
    raw = bytearray(build_test_datagram(TestDatagram("fc00::1", "fc00::2", SenderTestPayload(3, NtpTimestamp(), 9), 1)))
    raw[-1] ^= 0x01
    with pytest.raises(ChecksumMismatchError) as ei:
        parse_test_datagram(bytes(raw))
    assert ei.value.datagram.payload.sequence_number == 3
    d = parse_test_datagram(bytes(raw), verify=False)
    assert d.payload.ssid == 9


# -- properties ---------------------------------------------------------------

@settings(max_examples=1000)
@given(sender_payloads)
def test_sender_roundtrip(p):
    raw = encode_sender_payload(p)
    assert len(raw) == PAYLOAD_LEN
    assert decode_sender_payload(raw) == p


@settings(max_examples=1000)
@given(reflector_payloads)
def test_reflector_roundtrip(p):
    raw = encode_reflector_payload(p)
    assert len(raw) == PAYLOAD_LEN
    assert decode_reflector_payload(raw) == p


@settings(max_examples=500)
@given(sender_payloads)
def test_sender_matches_oracle_layout(p):
    want = oracles.sender_payload(p.sequence_number, p.timestamp.seconds, p.timestamp.fraction,
                                  oracles.ee_word(p.error_estimate.s_bit, p.error_estimate.z_bit,
                                                  p.error_estimate.scale, p.error_estimate.multiplier), p.ssid)
    assert encode_sender_payload(p) == want


@settings(max_examples=500)
@given(reflector_payloads)
def test_reflector_matches_oracle_layout(p):
    def w(e):
        return oracles.ee_word(e.s_bit, e.z_bit, e.scale, e.multiplier)
    want = oracles.reflector_payload(p.sequence_number, p.timestamp.to_int(), w(p.error_estimate), p.ssid,
                                     p.receive_timestamp.to_int(), p.sender_sequence_number,
                                     p.sender_timestamp.to_int(), w(p.sender_error_estimate), p.sender_ttl)
    assert encode_reflector_payload(p) == want


@settings(max_examples=500)
@given(st.integers(0, 2**64 - 1))
def test_ntp_timestamp_bits_roundtrip(x):
    t = NtpTimestamp.from_int(x)
    assert NtpTimestamp.from_bytes(t.to_bytes()).to_int() == x


@settings(max_examples=500)
@given(srhs)
def test_srh_roundtrip(s):
    raw = encode_srh(s)
    assert len(raw) == 8 + 16 * len(s.segment_list)
    assert decode_srh(raw) == s


@settings(max_examples=1000)
@given(sender_payloads, st.sampled_from(["stamp"]), addrs, addrs, st.integers(1, 65535),
       st.integers(0, 255), st.lists(addrs, max_size=4))
def test_datagram_roundtrip_and_oracle(p, _, src, dst, sport, hop, path):
    srh = SegmentRoutingHeader(tuple(path)) if path else None
    d = TestDatagram(src, path[0] if path else dst, p, sport, 862, hop, srh)
    raw = build_test_datagram(d)
    assert parse_test_datagram(raw) == d
    want = oracles.datagram(src, path[0] if path else dst, encode_sender_payload(p), sport, 862, hop, path or None)
    assert raw == want


@settings(max_examples=300)
@given(sender_payloads, st.data())
def test_single_byte_mutation_detected(p, data):
    """Any change to the UDP part is caught by the checksum or shows up as a field change."""
    raw = build_test_datagram(TestDatagram("fc00::1", "fc00::2", p, 50001))
    orig = parse_udp_datagram(raw)
    i = data.draw(st.integers(0, len(raw) - 1))
    m = bytearray(raw)
    m[i] ^= data.draw(st.integers(1, 255))
    try:
        got = parse_udp_datagram(bytes(m))
    except CodecError:
        return
    assert got != orig


@settings(max_examples=1500)
@given(st.binary(min_size=44, max_size=44))
def test_fuzz_decoders_never_crash(raw):
    for fn in (decode_sender_payload, decode_reflector_payload):
        try:
            fn(raw)
        except CodecError:
            pass


@settings(max_examples=1000)
@given(st.binary(max_size=200))
def test_fuzz_datagram_parser(raw):
    assert peek_udp(raw) is None or isinstance(peek_udp(raw), tuple)
    try:
        parse_udp_datagram(raw)
    except CodecError:
        pass


@settings(max_examples=500)
@given(sender_payloads, u32, timestamps, timestamps, st.integers(0, 255), estimates)
def test_echo_law(p, seq, t2, t3, ttl, ee):
    r = ReflectorTestPayload.echo(p, sequence_number=seq, receive_timestamp=t2, timestamp=t3, sender_ttl=ttl,
                                  error_estimate=ee)
    assert r.sender_sequence_number == p.sequence_number
    assert r.sender_timestamp == p.timestamp
    assert r.sender_error_estimate.to_int() == p.error_estimate.to_int()
    raw = encode_reflector_payload(r)
    assert raw[24:28] == encode_sender_payload(p)[0:4]
    assert raw[28:36] == encode_sender_payload(p)[4:12]
    assert raw[36:38] == encode_sender_payload(p)[12:14]
