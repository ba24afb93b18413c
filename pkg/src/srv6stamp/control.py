"""Southbound control channel between a controller and STAMP nodes.

Every message is a frame: a 4-byte big-endian length followed by UTF-8
JSON with sorted keys and no insignificant whitespace.  A request is
``{"id": n, "op": name, "body": {...}}``; the reply echoes ``id`` and
carries either ``{"status": "ok", "body": {...}}`` or
``{"status": "error", "error": {"code": c, "message": m}}``.
The field tables live in docs/control-schema.md.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import socket
import socketserver
import struct
import threading
import time
from typing import Callable, Iterator, Optional, Sequence

from .errors import (
    BadRequestError,
    DuplicateSsidError,
    IllegalTransitionError,
    InvalidConfigError,
    NotInitializedError,
    StampError,
    TransportError,
    UnsupportedError,
    error_from_code,
)
from .node import NodeGlobalConfig
from .reflector import ReflectorSessionConfig, SessionReflector
from .sender import MeasurementRecord, SessionConfig, SessionSender

log = logging.getLogger(__name__)

DEFAULT_CONTROL_PORT = 50052
DEFAULT_CONTROL_ADDR = "::1"
MAX_RESULTS_PER_REPLY = 1000
MAX_FRAME = 16 * 1024 * 1024

OPERATIONS = (
    "Init",
    "Reset",
    "CreateStampSession",
    "StartStampSession",
    "StopStampSession",
    "DestroyStampSession",
    "GetStampSessionResults",
)
EXTRA_OPERATIONS = ("GetProcessedCount", "Describe")

_LEN = struct.Struct("!I")


# -- framing -------------------------------------------------------------------

def encode_message(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode()
    if len(body) > MAX_FRAME:
        raise BadRequestError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body)) + body


def decode_message(frame: bytes) -> dict:
    """Inverse of encode_message for a complete frame."""
    if len(frame) < 4:
        raise BadRequestError("truncated frame")
    (n,) = _LEN.unpack_from(frame)
    if len(frame) - 4 != n:
        raise BadRequestError(f"frame length {n} but {len(frame) - 4} bytes follow")
    return _parse_body(frame[4:])


def _parse_body(body: bytes) -> dict:
    try:
        msg = json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadRequestError(f"malformed JSON: {exc}") from None
    if not isinstance(msg, dict):
        raise BadRequestError("message must be a JSON object")
    return msg


def read_message(sock: socket.socket) -> Optional[dict]:
    """Read one frame; None on clean EOF before a header."""
    head = _recv_exact(sock, 4, eof_ok=True)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise BadRequestError(f"frame of {n} bytes exceeds {MAX_FRAME}")
    return _parse_body(_recv_exact(sock, n))


def _recv_exact(sock, n, eof_ok=False):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if eof_ok and not buf:
                return None
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def ok_reply(req_id, body=None) -> dict:
    return {"id": req_id, "status": "ok", "body": body or {}}


def error_reply(req_id, err: StampError) -> dict:
    return {"id": req_id, "status": "error", "error": {"code": err.code, "message": err.message}}


# -- node side -----------------------------------------------------------------

def _ssid(body) -> int:
    ssid = body.get("ssid")
    if not isinstance(ssid, int) or isinstance(ssid, bool):
        raise InvalidConfigError(f"{ssid!r} is not an integer", field="ssid")
    return ssid


def _opt_int(body, key):
    v = body.get(key)
    if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
        raise InvalidConfigError(f"{v!r} is not an integer", field=key)
    return v


class NodeService:
    """Maps control requests onto a SessionSender or SessionReflector."""

    def __init__(self, node, *, max_results: int = MAX_RESULTS_PER_REPLY):
        self.node = node
        self.max_results = max_results
        self._lock = threading.Lock()

    @property
    def role(self) -> str:
        return self.node.role

    def handle(self, request: dict) -> dict:
        """Answer one request.  Never raises for a well-formed dict."""
        req_id = request.get("id")
        try:
            op = request.get("op")
            body = request.get("body") or {}
            if not isinstance(body, dict):
                raise BadRequestError("body must be an object")
            fn = getattr(self, f"_op_{op}", None) if isinstance(op, str) else None
            if fn is None:
                raise BadRequestError(f"unknown operation {op!r}")
            with self._lock:
                return ok_reply(req_id, fn(body))
        except StampError as exc:
            return error_reply(req_id, exc)
        except Exception as exc:  # keep the endpoint alive, report the fault
            log.exception("internal error handling %r", request.get("op"))
            return error_reply(req_id, StampError(f"{type(exc).__name__}: {exc}"))

    def _op_Init(self, body):
        self.node.init(NodeGlobalConfig.from_dict(body))
        return {}

    def _op_Reset(self, body):
        self.node.reset()
        return {}

    def _op_CreateStampSession(self, body):
        raw = body.get("session")
        if not isinstance(raw, dict):
            raise InvalidConfigError("missing session object", field="session")
        cls = SessionConfig if isinstance(self.node, SessionSender) else ReflectorSessionConfig
        state = self.node.create_session(cls.from_dict(raw))
        return {"ssid": state.config.ssid, "status": state.status.value}

    def _op_StartStampSession(self, body):
        state = self.node.start_session(_ssid(body), _opt_int(body, "duration_ns"), _opt_int(body, "count"))
        return {"ssid": state.config.ssid, "status": state.status.value}

    def _op_StopStampSession(self, body):
        state = self.node.stop_session(_ssid(body))
        return {"ssid": state.config.ssid, "status": state.status.value}

    def _op_DestroyStampSession(self, body):
        self.node.destroy_session(_ssid(body))
        return {}

    def _op_GetStampSessionResults(self, body):
        if not isinstance(self.node, SessionSender):
            raise UnsupportedError("GetStampSessionResults is served by the Session-Sender only")
        ssid = _ssid(body)
        limit = _opt_int(body, "max_results")
        limit = self.max_results if limit is None else min(max(limit, 0), self.max_results)
        state = self.node._get(ssid)
        records = state.fetch_results(limit)
        return {"ssid": ssid, "records": [r.to_dict() for r in records], "more": bool(state.results)}

    def _op_GetProcessedCount(self, body):
        return {"processed": self.node.processed_count(),
                "discards": {r.value: n for r, n in sorted(self.node.discards.items())}}

    def _op_Describe(self, body):
        return self.node.describe()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service = self.server.service
        sock = self.request
        while True:
            try:
                req = read_message(sock)
            except BadRequestError as exc:
                sock.sendall(encode_message(error_reply(None, exc)))
                return
            except (OSError, TransportError):
                return
            if req is None:
                return
            try:
                sock.sendall(encode_message(service.handle(req)))
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, service):
        self.address_family = socket.AF_INET6 if ":" in addr[0] else socket.AF_INET
        self.service = service
        super().__init__(addr, _Handler)


def control_endpoint(addr: Optional[str] = None, port: Optional[int] = None) -> tuple:
    """Resolve the control address, honouring STAMP_CONTROL_ADDR / STAMP_CONTROL_PORT."""
    if addr is None:
        addr = os.environ.get("STAMP_CONTROL_ADDR", DEFAULT_CONTROL_ADDR)
    if port is None:
        env = os.environ.get("STAMP_CONTROL_PORT")
        try:
            port = int(env) if env else DEFAULT_CONTROL_PORT
        except ValueError:
            raise InvalidConfigError(f"{env!r} is not a port", field="STAMP_CONTROL_PORT") from None
    return addr, port


class ControlServer:
    """Threaded TCP endpoint serving one NodeService."""

    def __init__(self, service: NodeService, addr: Optional[str] = None, port: Optional[int] = None):
        self.service = service
        self._server = _Server(control_endpoint(addr, port), service)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple:
        return self._server.server_address[:2]

    def start(self) -> "ControlServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="stamp-control", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


# -- controller side -----------------------------------------------------------

class Channel:
    def call(self, request: dict) -> dict:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LocalChannel(Channel):
    """In-process channel; still encodes and decodes every frame."""

    def __init__(self, service: NodeService):
        self.service = service

    def call(self, request: dict) -> dict:
        req = decode_message(encode_message(request))
        return decode_message(encode_message(self.service.handle(req)))


class TcpChannel(Channel):
    """Persistent TCP connection; reconnects once per call after a failure."""

    def __init__(self, addr: str, port: int, timeout: float = 5.0):
        self.addr, self.port, self.timeout = addr, port, timeout
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    def _connect(self):
        try:
            self._sock = socket.create_connection((self.addr, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach control endpoint [{self.addr}]:{self.port}: {exc}") from None

    def call(self, request: dict) -> dict:
        with self._lock:
            if self._sock is None:
                self._connect()
            try:
                self._sock.sendall(encode_message(request))
                reply = read_message(self._sock)
            except (OSError, TransportError) as exc:
                self.close()
                raise TransportError(f"control channel failed: {exc}") from None
            if reply is None:
                self.close()
                raise TransportError("control endpoint closed the connection")
            return reply

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class ControlClient:
    """Typed wrapper over a Channel.  Error replies are raised as StampError subclasses."""

    def __init__(self, channel: Channel):
        self.channel = channel
        self._ids = itertools.count(1)

    def request(self, op: str, body: Optional[dict] = None) -> dict:
        req_id = next(self._ids)
        reply = self.channel.call({"id": req_id, "op": op, "body": body or {}})
        if reply.get("id") != req_id:
            raise TransportError(f"reply id {reply.get('id')!r} does not match request {req_id}")
        if reply.get("status") == "ok":
            return reply.get("body") or {}
        err = reply.get("error") or {}
        raise error_from_code(err.get("code", "Internal"), err.get("message", ""))

    def init(self, cfg) -> None:
        self.request("Init", cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg))

    def reset(self) -> None:
        self.request("Reset")

    def create_session(self, cfg) -> int:
        body = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
        return self.request("CreateStampSession", {"session": body})["ssid"]

    def start_session(self, ssid: int, duration_ns: Optional[int] = None, count: Optional[int] = None) -> str:
        body = {"ssid": ssid}
        if duration_ns is not None:
            body["duration_ns"] = duration_ns
        if count is not None:
            body["count"] = count
        return self.request("StartStampSession", body)["status"]

    def stop_session(self, ssid: int) -> str:
        return self.request("StopStampSession", {"ssid": ssid})["status"]

    def destroy_session(self, ssid: int) -> None:
        self.request("DestroyStampSession", {"ssid": ssid})

    def get_results(self, ssid: int, max_results: Optional[int] = None) -> tuple:
        body = {"ssid": ssid}
        if max_results is not None:
            body["max_results"] = max_results
        r = self.request("GetStampSessionResults", body)
        return [MeasurementRecord.from_dict(d) for d in r["records"]], bool(r["more"])

    def processed_count(self) -> int:
        return self.request("GetProcessedCount")["processed"]

    def describe(self) -> dict:
        return self.request("Describe")


class Controller:
    """Drives one sender and one reflector through the configuration sequence."""

    def __init__(self, sender: ControlClient, reflector: ControlClient, *,
                 retries: int = 3, backoff_s: float = 0.05,
                 sleep: Callable[[float], None] = time.sleep):
        self.sender = sender
        self.reflector = reflector
        self.retries = retries
        self.backoff_s = backoff_s
        self.sleep = sleep
        self.gaps = 0

    @staticmethod
    def ensure_init(client: ControlClient, cfg: NodeGlobalConfig) -> dict:
        """Init the node unless it already is; return its global config."""
        d = client.describe()
        if not d["initialized"]:
            client.init(cfg)
            d = client.describe()
        return d["global"]

    def allocate_ssid(self) -> int:
        used = set()
        for c in (self.sender, self.reflector):
            used.update(int(k) for k in c.describe()["sessions"])
        for ssid in range(1, 65536):
            if ssid not in used:
                return ssid
        raise DuplicateSsidError("no free SSID")

    def create_measured_path(self, direct_sids: Sequence = (), return_sids: Sequence = (), *,
                             sender_init: Optional[NodeGlobalConfig] = None,
                             reflector_init: Optional[NodeGlobalConfig] = None,
                             ssid: Optional[int] = None, **params) -> int:
        """Configure both ends of one measured path and return its SSID.

        ``params`` are the remaining sender SessionConfig fields
        (``interval_ns``, ``delay_mode``, ``reflector_mode`` ...).  The
        reflector session is created first and destroyed again if the
        sender refuses its half.
        """
        s_glob = self.ensure_init(self.sender, sender_init) if sender_init else self.sender.describe()["global"]
        r_glob = (self.ensure_init(self.reflector, reflector_init) if reflector_init
                  else self.reflector.describe()["global"])
        if s_glob is None or r_glob is None:
            raise NotInitializedError("both nodes must be initialized")
        if ssid is None:
            ssid = self.allocate_ssid()
        if ssid == 0:
            raise InvalidConfigError("must be nonzero", field="ssid")
        reflector_mode = params.pop("reflector_mode", "stateless")
        reflector_mode = getattr(reflector_mode, "value", reflector_mode)
        refl_cfg = ReflectorSessionConfig(
            ssid=ssid,
            return_sid_list=tuple(return_sids),
            sender_addr=s_glob["src_ipv6"],
            reflector_port=r_glob["stamp_udp_port"],
            sender_port=s_glob["stamp_udp_port"],
            reflector_mode=reflector_mode,
        )
        send_cfg = SessionConfig(
            ssid=ssid,
            reflector_addr=params.pop("reflector_addr", r_glob["src_ipv6"]),
            sid_list=tuple(direct_sids),
            sender_port=s_glob["stamp_udp_port"],
            reflector_port=r_glob["stamp_udp_port"],
            reflector_mode=reflector_mode,
            **params,
        )
        self.reflector.create_session(refl_cfg)
        try:
            self.sender.create_session(send_cfg)
        except StampError:
            log.warning("sender refused session %d; rolling back the reflector", ssid)
            self.reflector.destroy_session(ssid)
            raise
        return ssid

    def start(self, ssid: int, duration_ns: Optional[int] = None, count: Optional[int] = None) -> None:
        self.reflector.start_session(ssid)
        self.sender.start_session(ssid, duration_ns, count)

    def stop(self, ssid: int) -> None:
        """Stop both halves; a half that already stopped on its own is left as is."""
        for c in (self.sender, self.reflector):
            try:
                c.stop_session(ssid)
            except IllegalTransitionError:
                pass

    def destroy(self, ssid: int) -> None:
        self.sender.destroy_session(ssid)
        self.reflector.destroy_session(ssid)

    def poll_results(self, ssid: int, max_results: Optional[int] = None) -> list:
        """Drain the sender queue for ``ssid``.

        Transport failures are retried with exponential backoff; if all
        retries fail the gap counter is incremented and an empty batch is
        returned.  Typed node errors propagate.
        """
        out = []
        more = True
        while more:
            for attempt in range(self.retries + 1):
                try:
                    batch, more = self.sender.get_results(ssid, max_results)
                    break
                except TransportError as exc:
                    if attempt == self.retries:
                        self.gaps += 1
                        log.warning("poll of session %d failed: %s", ssid, exc)
                        return out
                    self.sleep(self.backoff_s * (2 ** attempt))
            out.extend(batch)
        return out

    def follow(self, ssid: int, period_s: float, polls: Optional[int] = None) -> Iterator[list]:
        """Yield one drained batch per period, forever or ``polls`` times."""
        n = 0
        while polls is None or n < polls:
            yield self.poll_results(ssid)
            n += 1
            if polls is None or n < polls:
                self.sleep(period_s)


def make_node(role: str, transport, **kw):
    if role == "sender":
        return SessionSender(transport, **kw)
    if role == "reflector":
        return SessionReflector(transport, **kw)
    raise InvalidConfigError(f"{role!r} is not sender or reflector", field="role")
