"""Lifecycle shared by the Session-Sender and Session-Reflector nodes.

A node is configured once with :meth:`StampNode.init`, which installs the
transport filter on the STAMP UDP port, and torn down with
:meth:`StampNode.reset`.  Sessions move through created -> running ->
stopped and are then destroyed.  Every illegal step raises a typed
:class:`~srv6stamp.errors.StampError`.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from .codec import ipv6
from .errors import (
    AlreadyInitializedError,
    DuplicateSsidError,
    IllegalTransitionError,
    InvalidConfigError,
    NotInitializedError,
    SessionsExistError,
    UnknownSsidError,
)
from .transport import FilterSpec, Transport

log = logging.getLogger(__name__)


class SessionStatus(str, enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    STOPPED = "stopped"


class DiscardReason(str, enum.Enum):
    NOT_STAMP = "NotStamp"
    WRONG_SSID = "WrongSsid"
    SESSION_NOT_RUNNING = "SessionNotRunning"
    DECODE_ERROR = "DecodeError"


@dataclass(frozen=True)
class Discard:
    """Why a received datagram produced no record or reply."""

    reason: DiscardReason
    detail: str = ""

    def __bool__(self):
        return False


@dataclass(frozen=True)
class NodeGlobalConfig:
    """Parameters common to all sessions of a node (set by Init)."""

    stamp_udp_port: int
    src_ipv6: ipaddress.IPv6Address
    bind_interface: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.stamp_udp_port, int) or not 0 < self.stamp_udp_port < 65536:
            raise InvalidConfigError(f"{self.stamp_udp_port!r} is not a UDP port", field="stamp_udp_port")
        try:
            object.__setattr__(self, "src_ipv6", ipv6(self.src_ipv6))
        except ValueError as exc:
            raise InvalidConfigError(str(exc), field="src_ipv6") from None

    def to_dict(self) -> dict:
        return {"stamp_udp_port": self.stamp_udp_port, "src_ipv6": str(self.src_ipv6),
                "bind_interface": self.bind_interface}

    @classmethod
    def from_dict(cls, d: dict) -> "NodeGlobalConfig":
        unknown = set(d) - {"stamp_udp_port", "src_ipv6", "bind_interface"}
        if unknown:
            raise InvalidConfigError(f"unknown field(s) {sorted(unknown)}", field="global")
        for key in ("stamp_udp_port", "src_ipv6"):
            if key not in d:
                raise InvalidConfigError("missing", field=key)
        return cls(d["stamp_udp_port"], d["src_ipv6"], d.get("bind_interface"))


class StampNode:
    """Session table, Init/Reset and the create/start/stop/destroy state machine."""

    role = "node"

    def __init__(self, transport: Transport, *, clock_synchronized: bool = False,
                 hop_limit: int = 64):
        self.transport = transport
        self.clock = transport.clock
        self.clock_synchronized = clock_synchronized
        self.hop_limit = hop_limit
        self.global_config: Optional[NodeGlobalConfig] = None
        self.sessions: dict = {}
        self.discards: Counter = Counter()
        self._registration = None
        self._lock = threading.RLock()

    @property
    def initialized(self) -> bool:
        return self.global_config is not None

    # -- global configuration -------------------------------------------

    def init(self, cfg: NodeGlobalConfig) -> None:
        with self._lock:
            if self.initialized:
                raise AlreadyInitializedError(f"{self.role} already initialized; Reset first")
            spec = FilterSpec(cfg.stamp_udp_port, cfg.src_ipv6)
            self._registration = self.transport.register(spec, self._on_datagram)
            self.global_config = cfg
            log.info("%s initialized on [%s]:%d", self.role, cfg.src_ipv6, cfg.stamp_udp_port)

    def reset(self) -> None:
        """Drop the global configuration.  Idempotent; refuses while sessions exist."""
        with self._lock:
            if self.sessions:
                raise SessionsExistError(f"cannot reset: {len(self.sessions)} session(s) exist")
            if self._registration is not None:
                self.transport.unregister(self._registration)
                self._registration = None
            self.global_config = None

    def shutdown(self) -> None:
        """Stop and destroy every session, then reset."""
        with self._lock:
            for ssid, state in list(self.sessions.items()):
                if state.status is SessionStatus.RUNNING:
                    self.stop_session(ssid)
                self.destroy_session(ssid)
            self.reset()

    # -- session lifecycle ----------------------------------------------

    def _require_init(self) -> NodeGlobalConfig:
        if self.global_config is None:
            raise NotInitializedError(f"{self.role} not initialized; send Init first")
        return self.global_config

    def _get(self, ssid: int):
        self._require_init()
        try:
            return self.sessions[ssid]
        except KeyError:
            raise UnknownSsidError(f"no session with SSID {ssid}") from None

    def _new_state(self, cfg):
        raise NotImplementedError

    def create_session(self, cfg):
        with self._lock:
            self._require_init()
            if cfg.ssid in self.sessions:
                raise DuplicateSsidError(f"SSID {cfg.ssid} already in use")
            state = self._new_state(cfg)
            self.sessions[cfg.ssid] = state
            return state

    def start_session(self, ssid: int, duration_ns: Optional[int] = None,
                      count: Optional[int] = None):
        with self._lock:
            state = self._get(ssid)
            if state.status is not SessionStatus.CREATED:
                raise IllegalTransitionError(f"cannot start session {ssid} in state {state.status.value}")
            if duration_ns is not None and duration_ns <= 0:
                raise InvalidConfigError("must be positive", field="duration_ns")
            if count is not None and count < 0:
                raise InvalidConfigError("must be non-negative", field="count")
            state.status = SessionStatus.RUNNING
            self._on_start(state, duration_ns, count)
            return state

    def _on_start(self, state, duration_ns, count):
        pass

    def stop_session(self, ssid: int):
        with self._lock:
            state = self._get(ssid)
            if state.status is not SessionStatus.RUNNING:
                raise IllegalTransitionError(f"cannot stop session {ssid} in state {state.status.value}")
            state.status = SessionStatus.STOPPED
            self._on_stop(state)
            return state

    def _on_stop(self, state):
        pass

    def destroy_session(self, ssid: int) -> None:
        with self._lock:
            state = self._get(ssid)
            if state.status is SessionStatus.RUNNING:
                raise IllegalTransitionError(f"stop session {ssid} before destroying it")
            del self.sessions[ssid]

    # -- data plane -----------------------------------------------------

    def _on_datagram(self, datagram: bytes) -> None:
        raise NotImplementedError

    def processed_count(self) -> int:
        raise NotImplementedError

    def describe(self) -> dict:
        with self._lock:
            return {
                "role": self.role,
                "initialized": self.initialized,
                "global": self.global_config.to_dict() if self.global_config else None,
                "sessions": {str(ssid): s.describe() for ssid, s in sorted(self.sessions.items())},
                "discards": {r.value if hasattr(r, "value") else str(r): n
                             for r, n in sorted(self.discards.items())},
                "processed": self.processed_count(),
            }
