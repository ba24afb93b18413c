"""Datagram transports behind the Session-Sender and Session-Reflector.

Two backends share one contract:

* :class:`SimNetwork` / :class:`SimEndpoint` -- a deterministic discrete-event
  network in integer-nanosecond simulated time.
* :class:`UdpTransport` -- host sockets.  ``plain`` mode uses ordinary UDP
  sockets and therefore cannot emit the SRH: it is dropped on send and only
  counted in ``srh_stripped``.  ``raw`` mode needs CAP_NET_RAW and writes the
  IPv6+SRH header chain verbatim.

Consumers always see full IPv6(+SRH)/UDP datagrams.  A consumer registers a
:class:`FilterSpec`; it receives every datagram addressed to its port (and
address, when given) and nothing else.  Traffic matching no filter goes to
the endpoint's ``kernel_path`` sink, standing in for the kernel stack.
"""

from __future__ import annotations

import errno
import heapq
import ipaddress
import itertools
import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .codec import (
    IPV6_HEADER_LEN,
    IPPROTO_ROUTING,
    UdpDatagram,
    build_udp_datagram,
    ipv6,
    parse_udp_datagram,
    peek_udp,
)
from .errors import PrivilegeRequiredError, TransportError, UnroutableError
from .timebase import Clock, HostClock, SimClock, SimTimeline

log = logging.getLogger(__name__)

Consumer = Callable[[bytes], None]


@dataclass(frozen=True)
class FilterSpec:
    """Match on UDP destination port and, optionally, final destination address."""

    local_port: int
    local_addr: Optional[ipaddress.IPv6Address] = None

    def __post_init__(self):
        if self.local_addr is not None:
            object.__setattr__(self, "local_addr", ipv6(self.local_addr))

    def matches(self, final_dst: bytes, dst_port: int) -> bool:
        if dst_port != self.local_port:
            return False
        return self.local_addr is None or self.local_addr.packed == final_dst


@dataclass(eq=False)
class Registration:
    spec: FilterSpec
    consumer: Consumer
    matched: int = 0


class Transport:
    """Common dispatch and counters.  Backends implement send/call_later."""

    def __init__(self, clock: Clock):
        self.clock = clock
        self.registrations: list[Registration] = []
        self.kernel_path: Optional[Consumer] = None
        self.received = 0
        self.matched = 0
        self.unmatched = 0
        self.sent = 0
        self._reg_lock = threading.Lock()

    def register(self, spec: FilterSpec, consumer: Consumer) -> Registration:
        reg = Registration(spec, consumer)
        with self._reg_lock:
            self.registrations = self.registrations + [reg]
        return reg

    def unregister(self, reg: Registration) -> None:
        with self._reg_lock:
            self.registrations = [r for r in self.registrations if r is not reg]

    def dispatch(self, datagram: bytes) -> bool:
        """Hand a received datagram to the first matching consumer."""
        self.received += 1
        key = peek_udp(datagram)
        if key is not None:
            for reg in self.registrations:
                if reg.spec.matches(*key):
                    reg.matched += 1
                    self.matched += 1
                    reg.consumer(datagram)
                    return True
        self.unmatched += 1
        if self.kernel_path is not None:
            self.kernel_path(datagram)
        return False

    def send(self, datagram: bytes) -> None:
        raise NotImplementedError

    def call_later(self, delay_ns: int, fn: Callable[[], None]):
        raise NotImplementedError

    def close(self) -> None:
        pass


# -- simulated network --------------------------------------------------------

@dataclass(frozen=True)
class ConstantDelay:
    ns: int

    def sample(self, rng: random.Random) -> int:
        return self.ns

    @property
    def mean_ns(self) -> float:
        return float(self.ns)


@dataclass(frozen=True)
class UniformDelay:
    min_ns: int
    max_ns: int

    def __post_init__(self):
        if self.min_ns > self.max_ns or self.min_ns < 0:
            raise ValueError("uniform delay needs 0 <= min_ns <= max_ns")

    def sample(self, rng: random.Random) -> int:
        return rng.randint(self.min_ns, self.max_ns)

    @property
    def mean_ns(self) -> float:
        return (self.min_ns + self.max_ns) / 2


@dataclass
class SimLink:
    """One direction of a simulated path.

    With ``reorder`` false a packet never overtakes an earlier one on the
    same link, even when the sampled delay would let it.  ``hops`` is
    subtracted from the Hop Limit on delivery.
    """

    delay: object = field(default_factory=lambda: ConstantDelay(0))
    loss_prob: float = 0.0
    reorder: bool = False
    hops: int = 0
    sent: int = 0
    lost: int = 0
    delivered: int = 0
    _last_arrival: int = -1

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be within [0, 1]")


class _Event:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class SimNetwork:
    """Discrete-event scheduler plus routing between simulated endpoints.

    Events run in timestamp order; ties run in insertion order.  Given the
    same seed and scenario the delivery trace is identical.
    """

    def __init__(self, seed: int = 0, start_ns: int = 0, record_trace: bool = True):
        self.seed = seed
        self.timeline = SimTimeline(start_ns)
        self.endpoints: dict[ipaddress.IPv6Address, SimEndpoint] = {}
        self.links: dict[tuple, SimLink] = {}
        self._rngs: dict[tuple, random.Random] = {}
        self._queue: list = []
        self._seq = itertools.count()
        self.record_trace = record_trace
        self.trace: list[tuple] = []

    @property
    def now_ns(self) -> int:
        return self.timeline.now_ns

    def add_endpoint(self, addr, clock_offset_ns: int = 0, cls=None, **kw) -> "SimEndpoint":
        """Attach a node.  ``cls`` may name a SimEndpoint subclass built with ``kw``."""
        addr = ipv6(addr)
        if addr in self.endpoints:
            raise ValueError(f"endpoint {addr} already exists")
        ep = (cls or SimEndpoint)(self, addr, SimClock(self.timeline, clock_offset_ns), **kw)
        self.endpoints[addr] = ep
        return ep

    def connect(self, a, b, link: SimLink, reverse: Optional[SimLink] = None) -> None:
        """Install ``link`` for a->b and ``reverse`` (or a copy) for b->a."""
        a, b = ipv6(a), ipv6(b)
        self.links[(a, b)] = link
        self.links[(b, a)] = reverse if reverse is not None else SimLink(
            link.delay, link.loss_prob, link.reorder, link.hops)

    def link(self, a, b) -> SimLink:
        return self.links[(ipv6(a), ipv6(b))]

    def _rng(self, key) -> random.Random:
        rng = self._rngs.get(key)
        if rng is None:
            rng = self._rngs[key] = random.Random(f"{self.seed}:{key[0]}:{key[1]}")
        return rng

    def schedule(self, at_ns: int, fn: Callable[[], None]) -> _Event:
        ev = _Event()
        heapq.heappush(self._queue, (int(at_ns), next(self._seq), ev, fn))
        return ev

    def pending(self) -> int:
        return sum(1 for *_, ev, _ in self._queue if not ev.cancelled)

    def _transmit(self, src: "SimEndpoint", datagram: bytes) -> None:
        key = peek_udp(datagram)
        if key is None:
            raise UnroutableError("not an IPv6/UDP datagram")
        dst = ipaddress.IPv6Address(key[0])
        ep = self.endpoints.get(dst)
        link = self.links.get((src.addr, dst))
        if ep is None or link is None:
            raise UnroutableError(f"no route from {src.addr} to {dst}")
        now = self.timeline.now_ns
        link.sent += 1
        rng = self._rng((src.addr, dst))
        if link.loss_prob and rng.random() < link.loss_prob:
            link.lost += 1
            if self.record_trace:
                self.trace.append((now, "lost", str(src.addr), str(dst), datagram))
            return
        arrival = now + link.delay.sample(rng)
        if not link.reorder and arrival < link._last_arrival:
            arrival = link._last_arrival
        link._last_arrival = arrival
        if self.record_trace:
            self.trace.append((now, "send", str(src.addr), str(dst), datagram))
        self.schedule(arrival, lambda: self._deliver(ep, link, datagram))

    def _deliver(self, ep: "SimEndpoint", link: SimLink, datagram: bytes) -> None:
        datagram = _traverse(datagram, link.hops)
        if datagram is None:
            link.lost += 1
            return
        link.delivered += 1
        if self.record_trace:
            self.trace.append((self.timeline.now_ns, "deliver", None, str(ep.addr), datagram))
        ep.dispatch(datagram)

    def step(self) -> bool:
        """Run the earliest pending event.  Returns False when idle."""
        while self._queue:
            t, _, ev, fn = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.timeline.advance_to(t)
            fn()
            return True
        return False

    def run_until_idle(self, max_events: Optional[int] = None) -> int:
        n = 0
        while (max_events is None or n < max_events) and self.step():
            n += 1
        return n

    def run_until(self, t_ns: int) -> int:
        """Run every event scheduled at or before ``t_ns``, then set the clock there."""
        n = 0
        while self._queue and self._queue[0][0] <= t_ns:
            if self.step():
                n += 1
        if t_ns > self.timeline.now_ns:
            self.timeline.advance_to(t_ns)
        return n

    def run_for(self, delta_ns: int) -> int:
        return self.run_until(self.timeline.now_ns + delta_ns)


def _traverse(datagram: bytes, hops: int) -> Optional[bytes]:
    """Apply what the SRv6 path does in flight.

    The active segment becomes the final one (segments_left = 0) and the Hop
    Limit drops by ``hops``.  Neither touches the UDP checksum.
    """
    if hops == 0 and datagram[6] != IPPROTO_ROUTING:
        return datagram
    buf = bytearray(datagram)
    if hops:
        if buf[7] <= hops:
            return None
        buf[7] -= hops
    if buf[6] == IPPROTO_ROUTING and buf[IPV6_HEADER_LEN + 3]:
        srh = IPV6_HEADER_LEN
        buf[srh + 3] = 0
        buf[24:40] = buf[srh + 8:srh + 24]
    return bytes(buf)


class SimEndpoint(Transport):
    """A node attachment point on a SimNetwork."""

    def __init__(self, network: SimNetwork, addr: ipaddress.IPv6Address, clock: SimClock):
        super().__init__(clock)
        self.network = network
        self.addr = addr

    def send(self, datagram: bytes) -> None:
        self.sent += 1
        self.network._transmit(self, bytes(datagram))

    def call_later(self, delay_ns: int, fn: Callable[[], None]) -> _Event:
        return self.network.schedule(self.network.now_ns + max(0, int(delay_ns)), fn)


# -- host sockets --------------------------------------------------------------

class _TimerThread:
    """Single background thread running callbacks at monotonic deadlines."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stopped = False
        self._thread = threading.Thread(target=self._run, name="stamp-timer", daemon=True)
        self._thread.start()

    def call_later(self, delay_ns: int, fn) -> _Event:
        ev = _Event()
        with self._cv:
            heapq.heappush(self._heap, (time.monotonic_ns() + max(0, delay_ns), next(self._seq), ev, fn))
            self._cv.notify()
        return ev

    def _run(self):
        while True:
            with self._cv:
                while not self._stopped:
                    if self._heap:
                        wait = (self._heap[0][0] - time.monotonic_ns()) / 1e9
                        if wait <= 0:
                            break
                        self._cv.wait(wait)
                    else:
                        self._cv.wait()
                if self._stopped:
                    return
                _, _, ev, fn = heapq.heappop(self._heap)
            if not ev.cancelled:
                try:
                    fn()
                except Exception:
                    log.exception("timer callback failed")

    def stop(self):
        with self._cv:
            self._stopped = True
            self._cv.notify()
        self._thread.join(timeout=2)


_ETH_P_IPV6 = 0x86DD
_PACKET_OUTGOING = 4


class UdpTransport(Transport):
    """Host-socket backend.

    Parameters
    ----------
    mode : str
        ``"plain"`` (unprivileged UDP sockets, SRH stripped on send) or
        ``"raw"`` (IPv6 header chain written verbatim, needs CAP_NET_RAW).
    interface : str, optional
        Interface the raw receive socket binds to; all interfaces if None.
    """

    def __init__(self, mode: str = "plain", clock: Optional[Clock] = None, interface: Optional[str] = None):
        super().__init__(clock or HostClock())
        if mode not in ("plain", "raw"):
            raise ValueError(f"unknown transport mode {mode!r}")
        self.mode = mode
        self.interface = interface
        self.srh_stripped = 0
        self._socks: dict[Registration, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._closing = threading.Event()
        self._timer = _TimerThread()
        self._tx = None
        self._raw_rx = None
        if mode == "raw":
            try:
                self._tx = socket.socket(socket.AF_INET6, socket.SOCK_RAW, socket.IPPROTO_RAW)
                self._raw_rx = socket.socket(socket.AF_PACKET, socket.SOCK_DGRAM, socket.htons(_ETH_P_IPV6))
            except PermissionError as exc:
                self._timer.stop()
                raise PrivilegeRequiredError("raw mode needs CAP_NET_RAW") from exc
            if interface:
                self._raw_rx.bind((interface, _ETH_P_IPV6))
            self._raw_rx.settimeout(0.2)
            self._spawn(self._raw_loop)
        else:
            self._tx = socket.socket(socket.AF_INET6, socket.SOCK_DGRAM)

    def _spawn(self, target, *args):
        t = threading.Thread(target=target, args=args, daemon=True, name="stamp-rx")
        t.start()
        self._threads.append(t)

    def register(self, spec: FilterSpec, consumer: Consumer) -> Registration:
        reg = super().register(spec, consumer)
        if self.mode == "plain":
            s = socket.socket(socket.AF_INET6, socket.SOCK_DGRAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_RECVPKTINFO, 1)
            s.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_RECVHOPLIMIT, 1)
            try:
                s.bind((str(spec.local_addr) if spec.local_addr else "::", spec.local_port))
            except PermissionError as exc:
                s.close()
                super().unregister(reg)
                raise PrivilegeRequiredError(f"binding port {spec.local_port} needs privileges") from exc
            except OSError:
                s.close()
                super().unregister(reg)
                raise
            s.settimeout(0.2)
            self._socks[reg] = s
            self._spawn(self._plain_loop, reg, s)
        return reg

    def unregister(self, reg: Registration) -> None:
        super().unregister(reg)
        s = self._socks.pop(reg, None)
        if s is not None:
            s.close()

    def bound_port(self, reg: Registration) -> int:
        """Actual port of a plain-mode registration (useful with port 0)."""
        return self._socks[reg].getsockname()[1]

    def _plain_loop(self, reg: Registration, s: socket.socket):
        cmsg_space = socket.CMSG_SPACE(20) + socket.CMSG_SPACE(4)
        local_port = s.getsockname()[1]
        while not self._closing.is_set() and reg in self._socks:
            try:
                data, anc, _, peer = s.recvmsg(65535, cmsg_space)
            except socket.timeout:
                continue
            except OSError:
                return
            dst = reg.spec.local_addr or ipaddress.IPv6Address("::1")
            hop = 64
            for level, kind, cdata in anc:
                if level == socket.IPPROTO_IPV6 and kind == socket.IPV6_PKTINFO:
                    dst = ipaddress.IPv6Address(cdata[:16])
                elif level == socket.IPPROTO_IPV6 and kind == socket.IPV6_HOPLIMIT:
                    hop = struct.unpack("i", cdata[:4])[0]
            try:
                datagram = build_udp_datagram(UdpDatagram(
                    src_addr=peer[0].split("%")[0], dst_addr=dst, payload=data,
                    src_port=peer[1], dst_port=local_port, hop_limit=hop))
            except Exception:
                log.debug("dropping undecodable datagram from %s", peer)
                continue
            # The socket already did the port match; keep the per-port counters honest.
            self.received += 1
            reg.matched += 1
            self.matched += 1
            try:
                reg.consumer(datagram)
            except Exception:
                log.exception("consumer failed")

    def _raw_loop(self):
        while not self._closing.is_set():
            try:
                data, addr = self._raw_rx.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            if addr[2] == _PACKET_OUTGOING:
                continue
            try:
                self.dispatch(data)
            except Exception:
                log.exception("consumer failed")

    def send(self, datagram: bytes) -> None:
        self.sent += 1
        if self.mode == "raw":
            dst = str(ipaddress.IPv6Address(bytes(datagram[24:40])))
            self._sendto(self._tx, bytes(datagram), (dst, 0))
            return
        d = parse_udp_datagram(datagram, verify=False)
        if d.srh is not None:
            self.srh_stripped += 1
        sock = self._tx
        for reg, s in self._socks.items():
            if reg.spec.local_port == d.src_port or s.getsockname()[1] == d.src_port:
                sock = s
                break
        sock.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_UNICAST_HOPS, d.hop_limit)
        self._sendto(sock, d.payload, (str(d.final_dst), d.dst_port))

    @staticmethod
    def _sendto(sock, data, addr):
        try:
            sock.sendto(data, addr)
        except PermissionError as exc:
            raise PrivilegeRequiredError(str(exc)) from exc
        except OSError as exc:
            if exc.errno in (errno.ENETUNREACH, errno.EHOSTUNREACH, errno.EADDRNOTAVAIL):
                raise UnroutableError(f"{addr[0]}: {exc.strerror}") from exc
            raise TransportError(str(exc)) from exc

    def call_later(self, delay_ns: int, fn: Callable[[], None]) -> _Event:
        return self._timer.call_later(int(delay_ns), fn)

    def close(self) -> None:
        self._closing.set()
        self._timer.stop()
        for reg in list(self._socks):
            self.unregister(reg)
        for s in (self._tx, self._raw_rx):
            if s is not None:
                s.close()
        for t in self._threads:
            t.join(timeout=1)

