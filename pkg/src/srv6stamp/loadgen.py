"""Throughput harness: mixed data/STAMP traffic against a rate-limited node.

A trial offers a deterministic packet train to a system under test (SUT)
on a simulated network.  The SUT is a real SessionReflector or
SessionSender (collector) behind a CPU-credit token bucket, so its
capacity is known analytically and the search can be checked against it.

Drop accounting follows the two SUT roles:

* reflector: drops = sent - (data echoed + reflector packets returned)
* collector: drops = sent - (data echoed + processed STAMP counter), where
  the counter is read over the control channel after the trial.

``pdr_search`` bisects geometrically over ``[min_rate, max_rate]`` until
``hi / lo <= 1 + tolerance``, running ``trials`` trials per probe and
taking the median drop ratio.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional

from .codec import (
    ErrorEstimate,
    NtpTimestamp,
    ReflectorTestPayload,
    SenderTestPayload,
    TestDatagram,
    UdpDatagram,
    build_test_datagram,
    STAMP_PORT,
    build_udp_datagram,
    peek_udp,
)
from .control import ControlClient, LocalChannel, NodeService
from .errors import InvalidConfigError, NonMonotoneError, SutUnreachableError, TransportError
from .node import NodeGlobalConfig
from .reflector import ReflectorSessionConfig, SessionReflector
from .sender import DEFAULT_SENDER_PORT, SessionConfig, SessionSender
from .timebase import HostClock
from .transport import ConstantDelay, FilterSpec, SimEndpoint, SimLink, SimNetwork, Transport

TG_ADDR = "2001:db8:f::1"
SUT_ADDR = "2001:db8:f::2"
DATA_PORT = 9
SUT_ROLES = ("reflector", "collector")
DEFAULT_TARGET = 0.005
DEFAULT_TOLERANCE = 0.01
DEFAULT_TRIALS = 3
DEFAULT_TRIAL_NS = 200_000_000
_SSID = 1


@dataclass(frozen=True)
class TrafficMix:
    """A packet train: STAMP packets spread evenly among data packets.

    Packet ``k`` is STAMP exactly when ``floor((k+1)f) > floor(kf)`` for
    ``f = stamp_fraction``, so the first ``n`` packets hold ``floor(nf)``
    STAMP packets.
    """

    stamp_fraction: float = 0.0
    offered_rate: float = 1000.0
    duration_ns: int = DEFAULT_TRIAL_NS
    data_payload: bytes = bytes(18)

    def __post_init__(self):
        if not 0.0 <= self.stamp_fraction <= 1.0:
            raise InvalidConfigError("must be within [0, 1]", field="stamp_fraction")
        if self.offered_rate <= 0:
            raise InvalidConfigError("must be positive", field="offered_rate")
        if self.duration_ns <= 0:
            raise InvalidConfigError("must be positive", field="duration_ns")

    @property
    def fraction(self) -> Fraction:
        return Fraction(str(self.stamp_fraction))

    def packet_count(self) -> int:
        return max(1, int(Fraction(str(self.offered_rate)) * self.duration_ns / 10**9))

    def is_stamp(self, k: int) -> bool:
        f = self.fraction
        return (k + 1) * f.numerator // f.denominator > k * f.numerator // f.denominator

    def send_time(self, k: int) -> int:
        """Offset of packet ``k`` from the start of the trial, in ns."""
        r = Fraction(str(self.offered_rate))
        return int(k * 10**9 / r)

    def with_rate(self, rate: float) -> "TrafficMix":
        return TrafficMix(self.stamp_fraction, rate, self.duration_ns, self.data_payload)


class TokenBucket:
    """CPU credit in integer ns.  Each packet costs ``cost_ns``; credit caps at ``depth_ns``."""

    def __init__(self, capacity_pps: float, burst: int = 1):
        if capacity_pps <= 0:
            raise InvalidConfigError("must be positive", field="capacity_pps")
        self.cost_ns = round(10**9 / capacity_pps)
        self.depth_ns = self.cost_ns * burst
        self.credit = self.depth_ns
        self.last = None

    def admit(self, now_ns: int) -> bool:
        if self.last is not None:
            self.credit = min(self.depth_ns, self.credit + (now_ns - self.last))
        self.last = now_ns
        if self.credit >= self.cost_ns:
            self.credit -= self.cost_ns
            return True
        return False


class SutEndpoint(SimEndpoint):
    """Simulated SUT attachment: rate limiting first, then the STAMP filter.

    Traffic matching no STAMP filter is data and is forwarded back by
    swapping addresses and ports, which leaves the UDP checksum valid.
    """

    def __init__(self, network, addr, clock, capacity_pps: float = 10_000.0, burst: int = 1):
        super().__init__(network, addr, clock)
        self.bucket = TokenBucket(capacity_pps, burst)
        self.admitted = 0
        self.dropped = 0
        self.dropped_stamp = 0
        self.kernel_path = self._forward
        self.stamp_ports: set = set()

    def dispatch(self, datagram: bytes) -> bool:
        if not self.bucket.admit(self.clock.now_ns()):
            self.dropped += 1
            key = peek_udp(datagram)
            if key is not None and key[1] in self.stamp_ports:
                self.dropped_stamp += 1
            return False
        self.admitted += 1
        return super().dispatch(datagram)

    def _forward(self, datagram: bytes) -> None:
        buf = bytearray(datagram)
        buf[8:24], buf[24:40] = datagram[24:40], datagram[8:24]
        buf[40:42], buf[42:44] = datagram[42:44], datagram[40:42]
        self.send(bytes(buf))


@dataclass
class TrialResult:
    rate: float
    sut: str
    sent: int = 0
    sent_stamp: int = 0
    sent_data: int = 0
    data_echoed: int = 0
    stamp_returned: int = 0
    processed: int = 0
    bucket_dropped_stamp: int = 0
    node_discarded: int = 0
    duration_ns: int = 0

    @property
    def delivered(self) -> int:
        if self.sut == "reflector":
            return self.data_echoed + self.stamp_returned
        return self.data_echoed + self.processed

    @property
    def dropped(self) -> int:
        return self.sent - self.delivered

    @property
    def drop_ratio(self) -> float:
        return self.dropped / self.sent if self.sent else 0.0

    @property
    def dropped_stamp(self) -> int:
        ok = self.stamp_returned if self.sut == "reflector" else self.processed
        return self.sent_stamp - ok


def _setup_sut(role: str, ep: SutEndpoint):
    """Configure the SUT node through its control channel; return (client, tg_port)."""
    if role == "reflector":
        node = SessionReflector(ep)
        client = ControlClient(LocalChannel(NodeService(node)))
        client.init(NodeGlobalConfig(STAMP_PORT, SUT_ADDR))
        client.create_session(ReflectorSessionConfig(_SSID, sender_addr=TG_ADDR))
        client.start_session(_SSID)
        ep.stamp_ports.add(STAMP_PORT)
        return client, DEFAULT_SENDER_PORT
    if role == "collector":
        node = SessionSender(ep)
        client = ControlClient(LocalChannel(NodeService(node)))
        client.init(NodeGlobalConfig(DEFAULT_SENDER_PORT, SUT_ADDR))
        client.create_session(SessionConfig(_SSID, TG_ADDR))
        client.start_session(_SSID, count=0)  # collect only, transmit nothing
        ep.stamp_ports.add(DEFAULT_SENDER_PORT)
        return client, STAMP_PORT
    raise InvalidConfigError(f"{role!r} not one of {', '.join(SUT_ROLES)}", field="sut")


def stamp_packet(role: str, seq: int = 0) -> bytes:
    """The STAMP datagram the traffic generator offers to a SUT of ``role``."""
    ts = NtpTimestamp(3_900_000_000, 0)
    if role == "reflector":
        payload = SenderTestPayload(seq, ts, _SSID, ErrorEstimate())
        return build_test_datagram(TestDatagram(TG_ADDR, SUT_ADDR, payload, DEFAULT_SENDER_PORT, STAMP_PORT))
    payload = ReflectorTestPayload(seq, ts, ts, _SSID, seq, ts, 64, ErrorEstimate(), ErrorEstimate())
    return build_test_datagram(TestDatagram(TG_ADDR, SUT_ADDR, payload, STAMP_PORT, DEFAULT_SENDER_PORT))


def data_packet(payload: bytes = bytes(18)) -> bytes:
    return build_udp_datagram(UdpDatagram(TG_ADDR, SUT_ADDR, payload, src_port=DATA_PORT, dst_port=DATA_PORT))


def run_trial(mix: TrafficMix, sut: str, rate: Optional[float] = None, *,
              capacity_pps: float = 10_000.0, burst: int = 1, seed: int = 0,
              link_delay_ns: int = 10_000, loss_prob: float = 0.0) -> TrialResult:
    """Offer one packet train at ``rate`` (default: the mix's rate) and account drops."""
    if rate is not None:
        mix = mix.with_rate(rate)
    net = SimNetwork(seed=seed, start_ns=1_700_000_000 * 10**9, record_trace=False)
    tg = net.add_endpoint(TG_ADDR)
    ep = net.add_endpoint(SUT_ADDR, cls=SutEndpoint, capacity_pps=capacity_pps, burst=burst)
    net.connect(TG_ADDR, SUT_ADDR, SimLink(ConstantDelay(link_delay_ns), loss_prob))
    client, tg_port = _setup_sut(sut, ep)
    res = TrialResult(rate=mix.offered_rate, sut=sut)

    def count_data(_):
        res.data_echoed += 1

    def count_stamp(_):
        res.stamp_returned += 1

    tg.register(FilterSpec(DATA_PORT), count_data)
    tg.register(FilterSpec(tg_port), count_stamp)

    stamp = stamp_packet(sut)
    data = data_packet(mix.data_payload)
    start = net.now_ns
    for k in range(mix.packet_count()):
        if mix.is_stamp(k):
            res.sent_stamp += 1
            pkt = stamp
        else:
            res.sent_data += 1
            pkt = data
        net.schedule(start + mix.send_time(k), _sender(tg, pkt))
    res.sent = res.sent_stamp + res.sent_data
    net.run_until_idle()
    res.duration_ns = net.now_ns - start
    try:
        counts = client.request("GetProcessedCount")
    except TransportError as exc:
        raise SutUnreachableError(str(exc)) from exc
    res.processed = counts["processed"]
    res.node_discarded = sum(counts["discards"].values())
    res.bucket_dropped_stamp = ep.dropped_stamp
    return res


def _sender(ep: Transport, pkt: bytes):
    return lambda: ep.send(pkt)


@dataclass
class PdrResult:
    pdr_rate: float
    drop_ratio_at_rate: float
    failing_rate: Optional[float]
    trace: List[tuple] = field(default_factory=list)  # (rate, median drop ratio)
    simulated_ns: int = 0
    trials: int = 0

    def to_dict(self) -> dict:
        return {
            "pdr_rate": self.pdr_rate,
            "drop_ratio_at_rate": self.drop_ratio_at_rate,
            "failing_rate": self.failing_rate,
            "trace": [list(t) for t in self.trace],
            "simulated_ns": self.simulated_ns,
            "trials": self.trials,
        }


def check_monotone(trace, target: float) -> None:
    """Raise NonMonotoneError if a rate passed the target above a rate that failed it."""
    pts = sorted(trace)
    worst_fail = None
    for rate, ratio in pts:
        if ratio > target:
            if worst_fail is None:
                worst_fail = rate
        elif worst_fail is not None:
            raise NonMonotoneError(
                f"drop ratio {ratio:.4%} at {rate:.1f} pps passes but {worst_fail:.1f} pps failed",
                trace=pts)


def pdr_search(mix: TrafficMix, sut: str, target: float = DEFAULT_TARGET,
               tolerance: float = DEFAULT_TOLERANCE, *, min_rate: float = 1.0,
               max_rate: float = 100_000.0, trials: int = DEFAULT_TRIALS,
               trial_fn=None, **trial_kw) -> PdrResult:
    """Highest offered rate whose median drop ratio stays at or below ``target``.

    ``min_rate`` is assumed to pass and is not probed.  ``trial_fn`` may
    replace :func:`run_trial` (same signature) to search any SUT model.
    """
    if not 0 < min_rate < max_rate:
        raise InvalidConfigError("need 0 < min_rate < max_rate", field="min_rate")
    if tolerance <= 0:
        raise InvalidConfigError("must be positive", field="tolerance")
    trial_fn = trial_fn or run_trial
    trace: list = []
    out = PdrResult(pdr_rate=min_rate, drop_ratio_at_rate=0.0, failing_rate=None)

    def probe(rate):
        ratios = []
        for i in range(trials):
            r = trial_fn(mix, sut, rate, seed=trial_kw.get("seed", 0) + i,
                         **{k: v for k, v in trial_kw.items() if k != "seed"})
            ratios.append(r.drop_ratio)
            out.simulated_ns += getattr(r, "duration_ns", 0)
            out.trials += 1
        m = statistics.median(ratios)
        trace.append((rate, m))
        return m

    top = probe(max_rate)
    if top <= target:
        out.pdr_rate, out.drop_ratio_at_rate = max_rate, top
    else:
        lo, hi, lo_ratio = min_rate, max_rate, 0.0
        while hi / lo > 1 + tolerance:
            mid = (lo * hi) ** 0.5
            m = probe(mid)
            if m <= target:
                lo, lo_ratio = mid, m
            else:
                hi = mid
        out.pdr_rate, out.drop_ratio_at_rate, out.failing_rate = lo, lo_ratio, hi
    out.trace = trace
    check_monotone(trace, target)
    return out


# -- wall-clock processing benchmark -----------------------------------------

class _SinkTransport(Transport):
    """Discards what the node sends; only counts it."""

    def __init__(self):
        super().__init__(HostClock())

    def send(self, datagram: bytes) -> None:
        self.sent += 1

    def call_later(self, delay_ns, fn):
        return None


def processing_rate(role: str, packets: int = 20_000, repeats: int = 5) -> float:
    """Median packets/s a node handles at 100% STAMP, measured on this host.

    The node sits on a transport whose send is a no-op, so the figure is the
    cost of filtering, validation and (for the reflector) building the reply.
    """
    samples = []
    for _ in range(repeats):
        tr = _SinkTransport()
        if role == "reflector":
            node = SessionReflector(tr)
            node.init(NodeGlobalConfig(STAMP_PORT, SUT_ADDR))
            node.create_session(ReflectorSessionConfig(_SSID, sender_addr=TG_ADDR))
            node.start_session(_SSID)
        elif role == "collector":
            node = SessionSender(tr, queue_size=packets)
            node.init(NodeGlobalConfig(DEFAULT_SENDER_PORT, SUT_ADDR))
            node.create_session(SessionConfig(_SSID, TG_ADDR))
            node.start_session(_SSID, count=0)
        else:
            raise InvalidConfigError(f"{role!r} not one of {', '.join(SUT_ROLES)}", field="sut")
        pkt = stamp_packet(role)
        dispatch = tr.dispatch
        t0 = time.perf_counter()
        for _ in range(packets):
            dispatch(pkt)
        dt = time.perf_counter() - t0
        if node.processed_count() != packets:
            raise SutUnreachableError(f"{role} processed {node.processed_count()} of {packets}")
        samples.append(packets / dt)
    return statistics.median(samples)
