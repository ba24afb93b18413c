import ipaddress
import math
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simkit import R_ADDR, S_ADDR, probe
from srv6stamp.codec import UdpDatagram, build_udp_datagram, parse_test_datagram
from srv6stamp.errors import UnroutableError
from srv6stamp.node import NodeGlobalConfig
from srv6stamp.reflector import ReflectorSessionConfig, SessionReflector
from srv6stamp.sender import SessionConfig, SessionSender
from srv6stamp.transport import (
    ConstantDelay, FilterSpec, SimLink, SimNetwork, UdpTransport, UniformDelay, _traverse,
)

MS = 1_000_000


def _net(link, seed=0):
    net = SimNetwork(seed=seed)
    a = net.add_endpoint(S_ADDR)
    b = net.add_endpoint(R_ADDR)
    net.connect(S_ADDR, R_ADDR, link)
    got = []
    b.register(FilterSpec(862), lambda d: got.append((net.now_ns, d)))
    return net, a, b, got


def test_constant_delay_exact():
    net, a, b, got = _net(SimLink(ConstantDelay(5 * MS)))
    a.send(probe())
    assert net.run_until_idle() == 1
    assert got[0][0] == 5 * MS


def test_total_loss():
    net, a, b, got = _net(SimLink(ConstantDelay(MS), loss_prob=1.0))
    for i in range(50):
        a.send(probe(i))
    net.run_until_idle()
    link = net.link(S_ADDR, R_ADDR)
    assert got == [] and link.lost == link.sent == 50


def test_uniform_mean_within_three_sigma():
    net, a, b, got = _net(SimLink(UniformDelay(1 * MS, 9 * MS), reorder=True), seed=0)
    n = 10_000
    for i in range(n):
        net.schedule(0, lambda i=i: a.send(probe(i)))
    net.run_until_idle()
    mean = sum(t for t, _ in got) / n
    sigma = (8 * MS) / math.sqrt(12) / math.sqrt(n)
    assert abs(mean - 5 * MS) <= 3 * sigma


def test_two_sends_two_deliveries():
    net, a, b, got = _net(SimLink(ConstantDelay(MS)))
    a.send(probe(0))
    a.send(probe(1))
    assert net.run_until_idle() == 2


def test_fifo_without_reorder():
    net, a, b, got = _net(SimLink(UniformDelay(0, 9 * MS)))
    for i in range(200):
        net.schedule(i * 1000, lambda i=i: a.send(probe(i)))
    net.run_until_idle()
    seqs = [int.from_bytes(d[48:52], "big") for _, d in got]
    assert seqs == list(range(200))


def _trace(seed):
    net, a, b, got = _net(SimLink(UniformDelay(MS, 9 * MS), loss_prob=0.2, reorder=True), seed=seed)
    for i in range(300):
        net.schedule(i * 100_000, lambda i=i: a.send(probe(i)))
    net.run_until_idle()
    return net.trace


def test_same_seed_same_trace():
    assert _trace(3) == _trace(3)
    assert _trace(3) != _trace(4)


def test_ties_run_in_insertion_order():
    net = SimNetwork()
    out = []
    for i in range(20):
        net.schedule(100, lambda i=i: out.append(i))
    net.run_until_idle()
    assert out == list(range(20))


def test_cancelled_events_do_not_run():
    net = SimNetwork()
    out = []
    ev = net.schedule(5, lambda: out.append(1))
    ev.cancel()
    assert net.pending() == 0
    assert net.run_until_idle() == 0 and out == []


def test_run_until_sets_clock():
    net = SimNetwork(start_ns=10)
    net.schedule(50, lambda: None)
    net.schedule(500, lambda: None)
    assert net.run_until(100) == 1
    assert net.now_ns == 100
    assert net.run_for(1000) == 1


def test_unroutable():
    net = SimNetwork()
    a = net.add_endpoint(S_ADDR)
    with pytest.raises(UnroutableError):
        a.send(probe(dst="fc00::99"))
    with pytest.raises(UnroutableError):
        a.send(b"not a packet at all, clearly" * 3)


def test_filter_partition_and_kernel_path():
    net, a, b, got = _net(SimLink(ConstantDelay(MS)))
    kernel = []
    b.kernel_path = kernel.append
    other = build_udp_datagram(UdpDatagram(S_ADDR, R_ADDR, b"x" * 10, 9, 9))
    for i in range(7):
        a.send(probe(i))
    for i in range(5):
        a.send(other)
    net.run_until_idle()
    assert b.matched == len(got) == 7
    assert b.unmatched == len(kernel) == 5
    assert b.matched + b.unmatched == b.received == 12


def test_filter_on_address():
    spec = FilterSpec(862, R_ADDR)
    assert spec.matches(ipaddress.IPv6Address(R_ADDR).packed, 862)
    assert not spec.matches(ipaddress.IPv6Address(S_ADDR).packed, 862)
    assert not spec.matches(ipaddress.IPv6Address(R_ADDR).packed, 863)


def test_unregister_stops_delivery():
    net, a, b, got = _net(SimLink(ConstantDelay(MS)))
    b.unregister(b.registrations[0])
    a.send(probe())
    net.run_until_idle()
    assert got == [] and b.unmatched == 1


def test_hops_and_srh_traverse():
    pkt = probe(hop=64, sids=["fc00::a", R_ADDR])
    out = _traverse(pkt, 3)
    assert out[7] == 61
    assert out[40 + 3] == 0  # segments_left
    assert out[24:40] == pkt[48:64]  # destination is now the final segment
    assert _traverse(probe(hop=2), 2) is None


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_partition_property(kinds):
    net, a, b, got = _net(SimLink(ConstantDelay(MS)))
    other = build_udp_datagram(UdpDatagram(S_ADDR, R_ADDR, b"abc", 7, 7))
    for k in kinds:
        a.send(probe() if k else other)
    net.run_until_idle()
    assert b.matched == sum(kinds)
    assert b.matched + b.unmatched == b.received == len(kinds)


def _v6_loopback_ok():
    try:
        s = socket.socket(socket.AF_INET6, socket.SOCK_DGRAM)
        s.bind(("::1", 0))
        s.close()
        return True
    except OSError:
        return False


def _free_port():
    with socket.socket(socket.AF_INET6, socket.SOCK_DGRAM) as s:
        s.bind(("::1", 0))
        return s.getsockname()[1]


needs_v6 = pytest.mark.skipif(not _v6_loopback_ok(), reason="no IPv6 loopback")


@pytest.mark.network
@needs_v6
def test_udp_plain_loopback_strips_srh_and_keeps_hop_limit():
    tr = UdpTransport("plain")
    try:
        got = []
        done = threading.Event()
        rx = tr.register(FilterSpec(0, "::1"), lambda d: (got.append(d), done.set()))
        tx = tr.register(FilterSpec(0, "::1"), lambda d: None)
        rport, sport = tr.bound_port(rx), tr.bound_port(tx)
        tr.send(probe(seq=5, hop=33, sids=["::1"], dport=rport, sport=sport))
        assert done.wait(2.0)
        d = parse_test_datagram(got[0])
        assert (d.payload.sequence_number, d.src_port, d.dst_port, d.hop_limit) == (5, sport, rport, 33)
        assert d.srh is None and tr.srh_stripped == 1
    finally:
        tr.close()


@pytest.mark.network
@needs_v6
def test_sender_reflector_over_loopback():
    sp, rp = _free_port(), _free_port()
    st_, rt = UdpTransport("plain"), UdpTransport("plain")
    try:
        sender, reflector = SessionSender(st_), SessionReflector(rt)
        sender.init(NodeGlobalConfig(sp, "::1"))
        reflector.init(NodeGlobalConfig(rp, "::1"))
        reflector.create_session(ReflectorSessionConfig(7, reflector_mode="stateful"))
        sender.create_session(SessionConfig(7, "::1", interval_ns=5_000_000, reflector_port=rp))
        reflector.start_session(7)
        sender.start_session(7, count=5)
        deadline = time.monotonic() + 5
        while sender.sessions[7].enqueued < 5 and time.monotonic() < deadline:
            time.sleep(0.01)
        recs = sender.fetch_results(7)
        assert [r.sender_seq for r in recs] == [0, 1, 2, 3, 4]
        assert [r.reflector_seq for r in recs] == [0, 1, 2, 3, 4]
        for r in recs:
            assert r.t1.to_int() <= r.t2.to_int() <= r.t3.to_int() <= r.t4.to_int()
    finally:
        st_.close()
        rt.close()
