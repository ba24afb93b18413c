"""End-to-end measurement runs on the simulated network.

A scenario names two nodes, the links between them and one measured path.
The runner wires a SessionSender, a SessionReflector and a Controller over
in-process control channels, then runs everything in simulated time.  The
file format is described in docs/scenario-format.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .analytics import SessionAnalytics
from .codec import STAMP_PORT
from .control import ControlClient, Controller, LocalChannel, NodeService
from .errors import InvalidConfigError
from .node import NodeGlobalConfig
from .reflector import SessionReflector
from .sender import DEFAULT_SENDER_PORT, DelayMode, ReflectorMode, SessionSender
from .transport import ConstantDelay, SimLink, SimNetwork, UniformDelay

DEFAULT_START_NS = 1_700_000_000 * 10**9


@dataclass
class NodeSpec:
    addr: str
    port: int
    clock_offset_ns: int = 0
    clock_synchronized: bool = True


@dataclass
class LinkSpec:
    delay: object
    loss_prob: float = 0.0
    reorder: bool = False
    hops: int = 0


@dataclass
class Scenario:
    sender: NodeSpec
    reflector: NodeSpec
    direct: LinkSpec
    ret: LinkSpec
    probes: int = 100
    interval_ns: int = 10_000_000
    sid_list: tuple = ()
    return_sid_list: tuple = ()
    reflector_mode: str = "stateless"
    delay_mode: str = "two-way"
    ssid: Optional[int] = None
    seed: int = 0
    start_ns: int = DEFAULT_START_NS
    poll_period_ns: int = 100_000_000
    name: str = ""


_TOP = {"name", "seed", "start_ns", "nodes", "links", "session", "poll_period_ns"}
_NODE = {"addr", "port", "clock_offset_ns", "clock_synchronized"}
_LINK = {"delay_ns", "delay", "loss_prob", "reorder", "hops"}
_SESSION = {"ssid", "probes", "interval_ns", "sid_list", "return_sid_list", "reflector_mode", "delay_mode"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise InvalidConfigError("must be an object", field=where)
    extra = set(d) - allowed
    if extra:
        raise InvalidConfigError(f"unknown key(s) {sorted(extra)}", field=where)


def _int(d, key, where, default=None, minimum=None):
    v = d.get(key, default)
    if v is None and default is None:
        raise InvalidConfigError("missing", field=f"{where}.{key}")
    if not isinstance(v, int) or isinstance(v, bool):
        raise InvalidConfigError(f"{v!r} is not an integer", field=f"{where}.{key}")
    if minimum is not None and v < minimum:
        raise InvalidConfigError(f"must be >= {minimum}", field=f"{where}.{key}")
    return v


def _delay(d, where):
    if "delay_ns" in d and "delay" in d:
        raise InvalidConfigError("give delay_ns or delay, not both", field=where)
    if "delay_ns" in d:
        return ConstantDelay(_int(d, "delay_ns", where, minimum=0))
    spec = d.get("delay", {"type": "constant", "ns": 0})
    _check_keys(spec, {"type", "ns", "min_ns", "max_ns"}, f"{where}.delay")
    kind = spec.get("type", "constant")
    if kind == "constant":
        return ConstantDelay(_int(spec, "ns", f"{where}.delay", minimum=0))
    if kind == "uniform":
        lo = _int(spec, "min_ns", f"{where}.delay", minimum=0)
        hi = _int(spec, "max_ns", f"{where}.delay", minimum=lo)
        return UniformDelay(lo, hi)
    raise InvalidConfigError(f"{kind!r} is not constant or uniform", field=f"{where}.delay.type")


def _link(d, where) -> LinkSpec:
    _check_keys(d, _LINK | {"from", "to"}, where)
    loss = d.get("loss_prob", 0.0)
    if not isinstance(loss, (int, float)) or not 0.0 <= loss <= 1.0:
        raise InvalidConfigError(f"{loss!r} not within [0, 1]", field=f"{where}.loss_prob")
    return LinkSpec(_delay(d, where), float(loss), bool(d.get("reorder", False)),
                    _int(d, "hops", where, 0, minimum=0))


def scenario_from_dict(d: dict) -> Scenario:
    _check_keys(d, _TOP, "scenario")
    nodes = d.get("nodes")
    _check_keys(nodes, {"sender", "reflector"}, "nodes")
    specs = {}
    for role, port in (("sender", DEFAULT_SENDER_PORT), ("reflector", STAMP_PORT)):
        n = nodes.get(role)
        if n is None:
            raise InvalidConfigError("missing", field=f"nodes.{role}")
        _check_keys(n, _NODE, f"nodes.{role}")
        if "addr" not in n:
            raise InvalidConfigError("missing", field=f"nodes.{role}.addr")
        specs[role] = NodeSpec(n["addr"], _int(n, "port", f"nodes.{role}", port, minimum=1),
                               _int(n, "clock_offset_ns", f"nodes.{role}", 0),
                               bool(n.get("clock_synchronized", True)))
    links = d.get("links")
    if not isinstance(links, list) or not links:
        raise InvalidConfigError("need at least one link", field="links")
    by_dir = {}
    for i, ln in enumerate(links):
        where = f"links[{i}]"
        _check_keys(ln, _LINK | {"from", "to"}, where)
        key = (ln.get("from"), ln.get("to"))
        if key not in (("sender", "reflector"), ("reflector", "sender")):
            raise InvalidConfigError("from/to must be sender and reflector", field=where)
        if key in by_dir:
            raise InvalidConfigError("duplicate direction", field=where)
        by_dir[key] = _link(ln, where)
    direct = by_dir.get(("sender", "reflector"))
    ret = by_dir.get(("reflector", "sender"))
    if direct is None and ret is None:
        raise InvalidConfigError("no usable link", field="links")
    direct = direct or LinkSpec(ret.delay, ret.loss_prob, ret.reorder, ret.hops)
    ret = ret or LinkSpec(direct.delay, direct.loss_prob, direct.reorder, direct.hops)
    sess = d.get("session", {})
    _check_keys(sess, _SESSION, "session")
    ssid = sess.get("ssid")
    if ssid is not None:
        ssid = _int(sess, "ssid", "session", minimum=1)
    return Scenario(
        sender=specs["sender"], reflector=specs["reflector"], direct=direct, ret=ret,
        probes=_int(sess, "probes", "session", 100, minimum=1),
        interval_ns=_int(sess, "interval_ns", "session", 10_000_000, minimum=1),
        sid_list=tuple(sess.get("sid_list", ())),
        return_sid_list=tuple(sess.get("return_sid_list", ())),
        reflector_mode=_choice(sess, "reflector_mode", ReflectorMode, "stateless"),
        delay_mode=_choice(sess, "delay_mode", DelayMode, "two-way"),
        ssid=ssid,
        seed=_int(d, "seed", "scenario", 0),
        start_ns=_int(d, "start_ns", "scenario", DEFAULT_START_NS, minimum=0),
        poll_period_ns=_int(d, "poll_period_ns", "scenario", 100_000_000, minimum=1),
        name=str(d.get("name", "")),
    )


def _choice(d, key, kind, default):
    v = d.get(key, default)
    if v not in {m.value for m in kind}:
        raise InvalidConfigError(f"{v!r} not one of {', '.join(m.value for m in kind)}", field=f"session.{key}")
    return v


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}", field=str(path)) from None
    return scenario_from_dict(d)


@dataclass
class ScenarioResult:
    scenario: Scenario
    ssid: int
    sent: int
    records: list
    analytics: SessionAnalytics
    lost_direct: int
    lost_return: int
    polls: int
    simulated_ns: int
    trace: list = field(default_factory=list)

    def report(self) -> dict:
        sc = self.scenario
        a = self.analytics
        out = {
            "name": sc.name,
            "ssid": self.ssid,
            "seed": sc.seed,
            "probes_sent": self.sent,
            "records": len(self.records),
            "lost_direct": self.lost_direct,
            "lost_return": self.lost_return,
            "polls": self.polls,
            "simulated_ns": self.simulated_ns,
            "configured_d_ns": sc.direct.delay.mean_ns,
            "configured_r_ns": sc.ret.delay.mean_ns,
            "reflector_offset_ns": sc.reflector.clock_offset_ns - sc.sender.clock_offset_ns,
            "measured_avg_d_ns": a.state.avg_d,
            "measured_avg_r_ns": a.state.avg_r,
            "negative_samples": a.negative,
        }
        if a.two_way and a.state.n:
            out["measured_avg_two_way_ns"] = a.state.avg_d + a.state.avg_r
        return out


def run_scenario(sc: Scenario) -> ScenarioResult:
    """Configure both nodes through a controller and run until every probe settles."""
    net = SimNetwork(seed=sc.seed, start_ns=sc.start_ns)
    s_ep = net.add_endpoint(sc.sender.addr, sc.sender.clock_offset_ns)
    r_ep = net.add_endpoint(sc.reflector.addr, sc.reflector.clock_offset_ns)
    net.connect(sc.sender.addr, sc.reflector.addr,
                SimLink(sc.direct.delay, sc.direct.loss_prob, sc.direct.reorder, sc.direct.hops),
                SimLink(sc.ret.delay, sc.ret.loss_prob, sc.ret.reorder, sc.ret.hops))
    sender = SessionSender(s_ep, clock_synchronized=sc.sender.clock_synchronized)
    reflector = SessionReflector(r_ep, clock_synchronized=sc.reflector.clock_synchronized)
    ctl = Controller(ControlClient(LocalChannel(NodeService(sender))),
                     ControlClient(LocalChannel(NodeService(reflector))))
    ssid = ctl.create_measured_path(
        sc.sid_list, sc.return_sid_list,
        sender_init=NodeGlobalConfig(sc.sender.port, sc.sender.addr),
        reflector_init=NodeGlobalConfig(sc.reflector.port, sc.reflector.addr),
        ssid=sc.ssid, interval_ns=sc.interval_ns,
        reflector_mode=sc.reflector_mode, delay_mode=sc.delay_mode)
    analytics = SessionAnalytics(ssid=ssid, delay_mode=DelayMode(sc.delay_mode))
    records: list = []
    polls = 0

    def poll():
        nonlocal polls
        batch = ctl.poll_results(ssid)
        polls += 1
        records.extend(batch)
        analytics.extend(batch)

    t0 = net.now_ns
    ctl.start(ssid, count=sc.probes)
    # Poll periodically while probes are in flight, then drain once more.
    horizon = t0 + sc.probes * sc.interval_ns
    t = t0 + sc.poll_period_ns
    while t <= horizon:
        net.schedule(t, poll)
        t += sc.poll_period_ns
    net.run_until_idle()
    poll()
    sent = sender.sessions[ssid].sent
    ctl.stop(ssid)
    ctl.destroy(ssid)
    link_d = net.link(sc.sender.addr, sc.reflector.addr)
    link_r = net.link(sc.reflector.addr, sc.sender.addr)
    return ScenarioResult(sc, ssid, sent, records, analytics, link_d.lost, link_r.lost, polls,
                          net.now_ns - t0, net.trace)
