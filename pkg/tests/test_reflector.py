import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simkit import R_ADDR, R_PORT, S_ADDR, S_PORT, pair, probe, reflector_node, session
from srv6stamp.codec import (
    ErrorEstimate, NtpTimestamp, ReflectorTestPayload, parse_test_datagram,
)
from srv6stamp.errors import InvalidConfigError, SessionsExistError
from srv6stamp.node import DiscardReason, NodeGlobalConfig
from srv6stamp.reflector import ReflectorSessionConfig, ReflectorSessionState, SessionReflector
from srv6stamp.timebase import SimClock, SimTimeline


def _reply(p, pkt):
    out = p.reflector.on_receive(pkt)
    assert isinstance(out, bytes), out
    return parse_test_datagram(out, ReflectorTestPayload)


def test_stateless_echoes_sequence():
    p = reflector_node("stateless")
    assert _reply(p, probe(17)).payload.sequence_number == 17


def test_stateful_counts_from_zero():
    p = reflector_node("stateful")
    assert [_reply(p, probe(s)).payload.sequence_number for s in (5, 9, 9)] == [0, 1, 2]


@pytest.mark.parametrize("hop", [1, 63, 64, 255])
def test_sender_ttl_copies_hop_limit(hop):
    p = reflector_node()
    r = _reply(p, probe(hop=hop))
    assert r.payload.sender_ttl == hop
    assert r.hop_limit == 64


def test_reply_addressing():
    p = reflector_node()
    r = _reply(p, probe(sport=40000))
    assert str(r.src_addr) == R_ADDR and str(r.dst_addr) == S_ADDR
    assert (r.src_port, r.dst_port) == (R_PORT, 40000)


def test_return_sid_list_attached():
    p = pair()
    p.reflector.init(NodeGlobalConfig(R_PORT, R_ADDR))
    p.reflector.create_session(ReflectorSessionConfig(42, return_sid_list=("fc00::b", S_ADDR)))
    p.reflector.start_session(42)
    r = _reply(p, probe())
    assert [str(a) for a in r.srh.segment_list] == ["fc00::b", S_ADDR]
    assert str(r.dst_addr) == "fc00::b"


def test_echo_fields_and_timestamps():
    p = reflector_node()
    t1 = NtpTimestamp(3_900_000_000, 0xDEADBEEF)
    ee = ErrorEstimate(True, False, 7, 200)
    r = _reply(p, probe(99, t1=t1, ee=ee)).payload
    assert r.sender_sequence_number == 99 and r.sender_timestamp == t1
    assert r.sender_error_estimate == ee
    assert r.receive_timestamp == r.timestamp == p.r_ep.clock.now_ntp()
    assert r.error_estimate.s_bit is True  # the reflector's own sync flag


def test_t3_not_before_t2():
    cfg = ReflectorSessionConfig(42)
    st_ = ReflectorSessionState(cfg, R_ADDR, R_PORT)
    st_.status = st_.status.RUNNING
    tl = SimTimeline(1_700_000_000 * 10**9)
    t2 = SimClock(tl).now_ntp()
    tl.advance(1234)
    out = parse_test_datagram(st_.reflect(probe(), SimClock(tl), t2), ReflectorTestPayload).payload
    assert out.receive_timestamp == t2
    assert out.timestamp.to_int() > t2.to_int()


def test_stateless_is_pure():
    p = reflector_node()
    pkt = probe(3)
    assert p.reflector.on_receive(pkt) == p.reflector.on_receive(pkt)


def test_discards():
    p = reflector_node(start=False)
    assert p.reflector.on_receive(probe()).reason is DiscardReason.SESSION_NOT_RUNNING
    p.reflector.start_session(42)
    assert p.reflector.on_receive(probe(ssid=43)).reason is DiscardReason.WRONG_SSID
    assert p.reflector.on_receive(probe(dport=R_PORT + 1)).reason is DiscardReason.NOT_STAMP
    assert p.reflector.on_receive(b"junk").reason is DiscardReason.NOT_STAMP
    bad = bytearray(probe())
    bad[-1] ^= 1
    assert p.reflector.on_receive(bytes(bad)).reason is DiscardReason.DECODE_ERROR
    p.reflector.stop_session(42)
    assert p.reflector.on_receive(probe()).reason is DiscardReason.SESSION_NOT_RUNNING
    assert p.reflector.reflected == 0
    assert p.reflector.discards[DiscardReason.SESSION_NOT_RUNNING] == 2


def test_destroy_then_recreate_resets_counter():
    p = reflector_node("stateful")
    for _ in range(3):
        _reply(p, probe())
    p.reflector.stop_session(42)
    p.reflector.destroy_session(42)
    p.reflector.create_session(ReflectorSessionConfig(42, reflector_mode="stateful"))
    p.reflector.start_session(42)
    assert _reply(p, probe()).payload.sequence_number == 0


def test_reset_refused_while_sessions_exist():
    p = reflector_node()
    with pytest.raises(SessionsExistError):
        p.reflector.reset()
    p.reflector.shutdown()
    assert not p.reflector.initialized and not p.reflector.sessions
    p.reflector.reset()  # idempotent


def test_port_must_match_node():
    p = pair()
    p.reflector.init(NodeGlobalConfig(R_PORT, R_ADDR))
    with pytest.raises(InvalidConfigError) as ei:
        p.reflector.create_session(ReflectorSessionConfig(1, reflector_port=R_PORT + 1))
    assert ei.value.field == "reflector_port"


def test_config_dict_roundtrip():
    c = ReflectorSessionConfig(5, return_sid_list=("fc00::b",), sender_addr=S_ADDR, sender_port=S_PORT,
                               reflector_mode="stateful")
    assert ReflectorSessionConfig.from_dict(c.to_dict()) == c


@settings(max_examples=100)
@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=50), st.sampled_from(["stateless", "stateful"]))
def test_sequence_semantics(seqs, mode):
    p = reflector_node(mode)
    got = [_reply(p, probe(s)).payload.sequence_number for s in seqs]
    assert got == (seqs if mode == "stateless" else list(range(len(seqs))))


def test_stateless_bijection_over_sim():
    p = pair()
    ssid = session(p, interval_ns=1_000_000)
    p.reflector.start_session(ssid)
    p.sender.start_session(ssid, count=200)
    p.net.run_until_idle()
    recs = p.sender.fetch_results(ssid)
    assert sorted(r.reflector_seq for r in recs) == sorted(r.sender_seq for r in recs) == list(range(200))


def test_concurrent_stateful_counter_is_atomic():
    import threading
    p = reflector_node("stateful")
    seqs, lock = [], threading.Lock()

    def worker():
        for _ in range(500):
            out = p.reflector.on_receive(probe(random.randrange(2**32)))
            s = parse_test_datagram(out, ReflectorTestPayload).payload.sequence_number
            with lock:
                seqs.append(s)

    ts = [threading.Thread(target=worker) for _ in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert sorted(seqs) == list(range(2000))


def test_make_node_rejects_unknown_role():
    from srv6stamp.control import make_node
    with pytest.raises(InvalidConfigError):
        make_node("collector", None)
    assert isinstance(make_node("reflector", pair().r_ep), SessionReflector)
