"""Command-line entry points: stampd, stampctl, stampsim and stampload.

Results go to stdout and diagnostics to stderr.  Each failure class has
its own exit status (see EXIT_CODES and docs/cli.md).
"""

from __future__ import annotations

import argparse
import csv
import ipaddress
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Optional

from . import __version__
from .analytics import SessionAnalytics, export, write_csv
from .codec import STAMP_PORT
from .control import (
    DEFAULT_CONTROL_PORT,
    ControlClient,
    ControlServer,
    Controller,
    NodeService,
    TcpChannel,
    control_endpoint,
    make_node,
)
from .errors import CodecError, InvalidConfigError, StampError
from .loadgen import (
    DEFAULT_TARGET,
    DEFAULT_TOLERANCE,
    DEFAULT_TRIAL_NS,
    DEFAULT_TRIALS,
    SUT_ROLES,
    TrafficMix,
    pdr_search,
    processing_rate,
    run_trial,
)
from .node import NodeGlobalConfig
from .reflector import ReflectorSessionConfig
from .scenario import load_scenario, run_scenario
from .sender import DEFAULT_SENDER_PORT, DelayMode, ReflectorMode, SessionConfig
from .transport import UdpTransport

log = logging.getLogger("srv6stamp")

EXIT_OK = 0
EXIT_CODES = {
    "Internal": 1,
    # 2 is argparse usage errors
    "InvalidConfig": 3,
    "TransportError": 4,
    "Unroutable": 4,
    "NotInitialized": 5,
    "AlreadyInitialized": 6,
    "SessionsExist": 7,
    "DuplicateSsid": 8,
    "UnknownSsid": 9,
    "IllegalTransition": 10,
    "NotRunning": 10,
    "Unsupported": 11,
    "BadRequest": 12,
    "PrivilegeRequired": 13,
    "EmptySeries": 14,
    "NonMonotone": 15,
    "IoError": 16,
    "SutUnreachable": 17,
    "DecodeError": 18,
}
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130


def exit_code_for(err: StampError) -> int:
    if isinstance(err, CodecError):
        return EXIT_CODES["DecodeError"]
    return EXIT_CODES.get(err.code, EXIT_CODES["Internal"])


def _run(fn, args) -> int:
    try:
        return fn(args) or EXIT_OK
    except StampError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return exit_code_for(exc)
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
    except BrokenPipeError:
        return EXIT_OK


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--log-level", default=os.environ.get("STAMP_LOG_LEVEL", "warning"),
                   choices=["debug", "info", "warning", "error"])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")


def _nonzero_ssid(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 < v < 65536:
        raise argparse.ArgumentTypeError("SSID must be a nonzero 16-bit integer")
    return v


def _ipv6_arg(text: str) -> str:
    try:
        return str(ipaddress.IPv6Address(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an IPv6 address") from None


def _endpoint(text: str) -> tuple:
    """Parse ``[addr]:port``, ``host:port`` or a bare port."""
    if text.isdigit():
        return control_endpoint(None, int(text))[0], int(text)
    if text.startswith("["):
        host, _, port = text[1:].partition("]:")
    else:
        host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"{text!r} is not [addr]:port")
    return host, int(port)


def _ms(text: str) -> int:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return round(v * 1_000_000)


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfigError(str(exc), field=str(path)) from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}", field=str(path)) from None
    if not isinstance(d, dict):
        raise InvalidConfigError("top level must be an object", field=str(path))
    return d


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- stampd --------------------------------------------------------------------

_DAEMON_KEYS = {"global", "control", "transport", "clock_synchronized", "sessions", "start_sessions"}


def load_daemon_config(role: str, path: Optional[str], args) -> dict:
    """Merge the config file with command-line overrides and validate it."""
    d = _read_json(path) if path else {}
    extra = set(d) - _DAEMON_KEYS
    if extra:
        raise InvalidConfigError(f"unknown key(s) {sorted(extra)}", field="config")
    g = dict(d.get("global") or {})
    if args.port is not None:
        g["stamp_udp_port"] = args.port
    if args.src is not None:
        g["src_ipv6"] = args.src
    g.setdefault("stamp_udp_port", STAMP_PORT if role == "reflector" else DEFAULT_SENDER_PORT)
    g.setdefault("src_ipv6", "::1")
    glob = NodeGlobalConfig.from_dict(g)
    ctl = d.get("control") or {}
    if set(ctl) - {"addr", "port"}:
        raise InvalidConfigError(f"unknown key(s) {sorted(set(ctl) - {'addr', 'port'})}", field="control")
    addr, port = control_endpoint(args.control_addr or ctl.get("addr"),
                                  args.control_port if args.control_port is not None else ctl.get("port"))
    mode = args.transport or d.get("transport", "plain")
    if mode not in ("plain", "raw"):
        raise InvalidConfigError(f"{mode!r} is not plain or raw", field="transport")
    cls = SessionConfig if role == "sender" else ReflectorSessionConfig
    raw_sessions = d.get("sessions") or []
    if not isinstance(raw_sessions, list):
        raise InvalidConfigError("must be a list", field="sessions")
    sessions = []
    for i, s in enumerate(raw_sessions):
        try:
            sessions.append(cls.from_dict(s))
        except InvalidConfigError as exc:
            raise InvalidConfigError(exc.message, field=f"sessions[{i}]") from None
        except TypeError as exc:
            raise InvalidConfigError(str(exc), field=f"sessions[{i}]") from None
    return {"global": glob, "control": (addr, port), "transport": mode,
            "clock_synchronized": bool(d.get("clock_synchronized", False)),
            "sessions": sessions, "start_sessions": bool(d.get("start_sessions", False))}


def _stampd(args) -> int:
    cfg = load_daemon_config(args.role, args.config, args)
    if args.check:
        _emit({"role": args.role, "global": cfg["global"].to_dict(), "control": list(cfg["control"]),
               "transport": cfg["transport"], "sessions": [s.to_dict() for s in cfg["sessions"]]})
        return EXIT_OK
    transport = UdpTransport(cfg["transport"], interface=cfg["global"].bind_interface)
    node = make_node(args.role, transport, clock_synchronized=cfg["clock_synchronized"])
    server = None
    try:
        node.init(cfg["global"])
        for s in cfg["sessions"]:
            node.create_session(s)
            if cfg["start_sessions"]:
                node.start_session(s.ssid)
        server = ControlServer(NodeService(node), *cfg["control"])
        addr, port = server.address
        stop = threading.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
        server.start()
        log.info("%s control endpoint on [%s]:%d", args.role, addr, port)
        _emit({"role": args.role, "control": [addr, port], "stamp_udp_port": cfg["global"].stamp_udp_port})
        stop.wait()
        log.info("shutting down")
    finally:
        if server is not None:
            server.close()
        node.shutdown()
        transport.close()
    return EXIT_OK


def stampd_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="stampd", description="Run a STAMP Session-Sender or Session-Reflector daemon.")
    p.add_argument("role", choices=["sender", "reflector"])
    p.add_argument("--config", help="JSON daemon config file")
    p.add_argument("--port", type=int, help="STAMP UDP port (overrides global.stamp_udp_port)")
    p.add_argument("--src", type=_ipv6_arg, help="source IPv6 address (overrides global.src_ipv6)")
    p.add_argument("--control-addr", help="control bind address")
    p.add_argument("--control-port", type=int, help="control TCP port (0 picks a free port)")
    p.add_argument("--transport", choices=["plain", "raw"])
    p.add_argument("--check", action="store_true", help="validate the config, print it and exit")
    _common(p)
    args = p.parse_args(argv)
    _setup_logging(args.log_level)
    return _run(_stampd, args)


# -- stampctl ------------------------------------------------------------------

def _client(ep) -> ControlClient:
    return ControlClient(TcpChannel(ep[0], ep[1]))


def _target(args) -> ControlClient:
    return _client(args.sender if args.node == "sender" else args.reflector)


def _ctl_init(args):
    _target(args).init(NodeGlobalConfig(args.port, args.src, args.interface))


def _ctl_reset(args):
    _target(args).reset()


def _ctl_describe(args):
    _emit(_target(args).describe())


def _controller(args) -> Controller:
    return Controller(_client(args.sender), _client(args.reflector))


def _ctl_create(args):
    params = {"interval_ns": args.interval, "delay_mode": args.delay_mode}
    if args.reflector_addr:
        params["reflector_addr"] = args.reflector_addr
    ssid = _controller(args).create_measured_path(
        args.sid, args.return_sid, ssid=args.ssid, reflector_mode=args.reflector_mode, **params)
    _emit({"ssid": ssid})


def _ctl_start(args):
    _controller(args).start(args.ssid, args.duration, args.count)


def _ctl_stop(args):
    _controller(args).stop(args.ssid)


def _ctl_destroy(args):
    _controller(args).destroy(args.ssid)


def _ctl_results(args):
    client = _target(args)
    ctl = Controller(client, client)
    analytics = SessionAnalytics(ssid=args.ssid, delay_mode=DelayMode(args.delay_mode))
    two_way = analytics.two_way
    out = open(args.csv, "a", newline="") if args.csv else None
    try:
        if out is not None and out.tell() == 0:
            write_csv([], out, two_way)
        polls = args.polls if args.follow else 1
        header = True
        for batch in ctl.follow(args.ssid, args.period, polls):
            rows = analytics.extend(batch)
            write_csv(rows, sys.stdout, two_way, header=header)
            header = False
            if out is not None:
                write_csv(rows, out, two_way, header=False)
                out.flush()
            sys.stdout.flush()
            if args.follow and analytics.state.n:
                print(f"n={analytics.state.n} avg_d_ns={analytics.state.avg_d:.1f} "
                      f"avg_r_ns={analytics.state.avg_r:.1f}", file=sys.stderr)
    finally:
        if out is not None:
            out.close()
    if ctl.gaps:
        print(f"warning: {ctl.gaps} poll(s) failed", file=sys.stderr)


def stampctl_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="stampctl", description="Controller actions against running STAMP daemons.")
    sender_default = os.environ.get("STAMP_SENDER_CONTROL", f"[::1]:{DEFAULT_CONTROL_PORT}")
    reflector_default = os.environ.get("STAMP_REFLECTOR_CONTROL", f"[::1]:{DEFAULT_CONTROL_PORT + 1}")
    p.add_argument("--sender", type=_endpoint, default=_endpoint(sender_default),
                   help="sender control endpoint [addr]:port")
    p.add_argument("--reflector", type=_endpoint, default=_endpoint(reflector_default),
                   help="reflector control endpoint [addr]:port")
    _common(p)
    sub = p.add_subparsers(dest="cmd", required=True)

    def node_arg(sp, default="sender"):
        sp.add_argument("--node", choices=["sender", "reflector"], default=default)

    sp = sub.add_parser("init", help="send Init to one node")
    node_arg(sp)
    sp.add_argument("--port", type=int, required=True)
    sp.add_argument("--src", type=_ipv6_arg, required=True)
    sp.add_argument("--interface")
    sp.set_defaults(fn=_ctl_init)

    sp = sub.add_parser("reset", help="send Reset to one node")
    node_arg(sp)
    sp.set_defaults(fn=_ctl_reset)

    sp = sub.add_parser("describe", help="print a node's state as JSON")
    node_arg(sp)
    sp.set_defaults(fn=_ctl_describe)

    sp = sub.add_parser("create", help="create a measured path on both nodes")
    sp.add_argument("--ssid", type=_nonzero_ssid, help="SSID (default: lowest free)")
    sp.add_argument("--sid", action="append", default=[], type=_ipv6_arg, help="direct-path SID (repeat)")
    sp.add_argument("--return-sid", action="append", default=[], type=_ipv6_arg, help="return-path SID (repeat)")
    sp.add_argument("--reflector-addr", type=_ipv6_arg)
    sp.add_argument("--interval", type=_ms, default=1_000_000_000, metavar="MS", help="probe interval in ms")
    sp.add_argument("--delay-mode", choices=[m.value for m in DelayMode], default="two-way")
    sp.add_argument("--reflector-mode", choices=[m.value for m in ReflectorMode], default="stateless")
    sp.set_defaults(fn=_ctl_create)

    sp = sub.add_parser("start", help="start both halves of a session")
    sp.add_argument("--ssid", type=_nonzero_ssid, required=True)
    sp.add_argument("--duration", type=_ms, metavar="MS")
    sp.add_argument("--count", type=int)
    sp.set_defaults(fn=_ctl_start)

    for name, fn in (("stop", _ctl_stop), ("destroy", _ctl_destroy)):
        sp = sub.add_parser(name, help=f"{name} both halves of a session")
        sp.add_argument("--ssid", type=_nonzero_ssid, required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("results", help="drain measurement records as CSV")
    node_arg(sp)
    sp.add_argument("--ssid", type=_nonzero_ssid, required=True)
    sp.add_argument("--follow", action="store_true", help="keep polling every --period seconds")
    sp.add_argument("--period", type=float, default=1.0)
    sp.add_argument("--polls", type=int, help="stop after this many polls (with --follow)")
    sp.add_argument("--csv", help="also append rows to this file")
    sp.add_argument("--delay-mode", choices=[m.value for m in DelayMode], default="two-way")
    sp.set_defaults(fn=_ctl_results)

    args = p.parse_args(argv)
    _setup_logging(args.log_level)
    return _run(args.fn, args)


# -- stampsim ------------------------------------------------------------------

def _stampsim_run(args):
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    res = run_scenario(sc)
    rep = res.report()
    if args.csv:
        export(res.analytics, "csv", args.csv)
    if args.format == "json":
        _emit(rep)
        return
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["direction", "configured_ns", "measured_avg_ns"])
    w.writerow(["direct", _num(rep["configured_d_ns"]), _num(rep["measured_avg_d_ns"])])
    w.writerow(["return", _num(rep["configured_r_ns"]), _num(rep["measured_avg_r_ns"])])
    if "measured_avg_two_way_ns" in rep:
        w.writerow(["two-way", _num(rep["configured_d_ns"] + rep["configured_r_ns"]),
                    _num(rep["measured_avg_two_way_ns"])])
    print(f"probes_sent={rep['probes_sent']} records={rep['records']} lost_direct={rep['lost_direct']} "
          f"lost_return={rep['lost_return']} reflector_offset_ns={rep['reflector_offset_ns']}", file=sys.stderr)


def _num(v):
    if v is None:
        return ""
    return int(v) if float(v).is_integer() else v


def stampsim_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="stampsim", description="Run STAMP measurements on a simulated network.")
    _common(p)
    sub = p.add_subparsers(dest="cmd", required=True)
    sp = sub.add_parser("run", help="run a scenario file")
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--format", choices=["table", "json"], default="table")
    sp.add_argument("--csv", help="write the per-sample series here")
    sp.set_defaults(fn=_stampsim_run)
    args = p.parse_args(argv)
    _setup_logging(args.log_level)
    return _run(args.fn, args)


# -- stampload -----------------------------------------------------------------

_EXPERIMENT_KEYS = {"sut", "capacity_pps", "stamp_fractions", "min_rate", "max_rate", "target",
                    "tolerance", "trials", "trial_duration_ns", "seed"}


def _experiment(args) -> dict:
    d = _read_json(args.spec) if args.spec else {}
    extra = set(d) - _EXPERIMENT_KEYS
    if extra:
        raise InvalidConfigError(f"unknown key(s) {sorted(extra)}", field="experiment")
    for key in _EXPERIMENT_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    d.setdefault("sut", "reflector")
    d.setdefault("capacity_pps", 10_000.0)
    d.setdefault("stamp_fractions", [0.0, 0.01, 0.5, 1.0])
    d.setdefault("min_rate", 1.0)
    d.setdefault("max_rate", 100_000.0)
    d.setdefault("target", DEFAULT_TARGET)
    d.setdefault("tolerance", DEFAULT_TOLERANCE)
    d.setdefault("trials", DEFAULT_TRIALS)
    d.setdefault("trial_duration_ns", DEFAULT_TRIAL_NS)
    d.setdefault("seed", 0)
    if d["sut"] not in SUT_ROLES:
        raise InvalidConfigError(f"{d['sut']!r} not one of {', '.join(SUT_ROLES)}", field="sut")
    return d


def _stampload_pdr(args):
    e = _experiment(args)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["sut", "stamp_fraction", "capacity_pps", "pdr_pps", "drop_ratio", "failing_pps",
                "probes", "simulated_ns"])
    for f in e["stamp_fractions"]:
        mix = TrafficMix(f, e["min_rate"], e["trial_duration_ns"])
        r = pdr_search(mix, e["sut"], e["target"], e["tolerance"], min_rate=e["min_rate"],
                       max_rate=e["max_rate"], trials=e["trials"], capacity_pps=e["capacity_pps"],
                       seed=e["seed"])
        w.writerow([e["sut"], f, e["capacity_pps"], f"{r.pdr_rate:.3f}", f"{r.drop_ratio_at_rate:.6f}",
                    "" if r.failing_rate is None else f"{r.failing_rate:.3f}", len(r.trace), r.simulated_ns])
        sys.stdout.flush()


def _stampload_trial(args):
    e = _experiment(args)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["sut", "stamp_fraction", "rate_pps", "sent", "sent_stamp", "data_echoed",
                "stamp_ok", "dropped", "drop_ratio"])
    for f in e["stamp_fractions"]:
        r = run_trial(TrafficMix(f, args.rate, e["trial_duration_ns"]), e["sut"],
                      capacity_pps=e["capacity_pps"], seed=e["seed"])
        ok = r.stamp_returned if r.sut == "reflector" else r.processed
        w.writerow([r.sut, f, args.rate, r.sent, r.sent_stamp, r.data_echoed, ok, r.dropped,
                    f"{r.drop_ratio:.6f}"])


def _stampload_bench(args):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["sut", "packets", "pps"])
    for role in SUT_ROLES:
        w.writerow([role, args.packets, f"{processing_rate(role, args.packets, args.repeats):.0f}"])


def _fractions(text):
    try:
        vals = [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of numbers") from None
    if not vals or any(not 0 <= v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("fractions must lie in [0, 1]")
    return vals


def stampload_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="stampload", description="PDR@0.5% experiments against a simulated SUT.")
    _common(p)
    sub = p.add_subparsers(dest="cmd", required=True)

    def exp_args(sp):
        sp.add_argument("--experiment", dest="spec", help="JSON experiment file; flags override it")
        sp.add_argument("--sut", choices=SUT_ROLES)
        sp.add_argument("--capacity", dest="capacity_pps", type=float)
        sp.add_argument("--fractions", dest="stamp_fractions", type=_fractions)
        sp.add_argument("--trial-ms", dest="trial_duration_ns", type=_ms)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("pdr", help="search PDR@target for each STAMP fraction")
    exp_args(sp)
    sp.add_argument("--min-rate", type=float)
    sp.add_argument("--max-rate", type=float)
    sp.add_argument("--target", type=float)
    sp.add_argument("--tolerance", type=float)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(fn=_stampload_pdr)

    sp = sub.add_parser("trial", help="one trial per STAMP fraction at a fixed rate")
    exp_args(sp)
    sp.add_argument("--rate", type=float, required=True)
    sp.set_defaults(fn=_stampload_trial)

    sp = sub.add_parser("bench", help="host processing rate of collector and reflector")
    sp.add_argument("--packets", type=int, default=20_000)
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(fn=_stampload_bench)

    args = p.parse_args(argv)
    _setup_logging(args.log_level)
    return _run(args.fn, args)


TOOLS = {"stampd": stampd_main, "stampctl": stampctl_main, "stampsim": stampsim_main, "stampload": stampload_main}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in TOOLS:
        print(f"usage: python -m srv6stamp {{{','.join(TOOLS)}}} ...", file=sys.stderr)
        return EXIT_USAGE
    return TOOLS[argv[0]](argv[1:])
