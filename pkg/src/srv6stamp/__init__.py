"""STAMP delay measurement for SRv6 paths.

Wire codecs, Session-Sender and Session-Reflector nodes, a southbound
control channel, controller-side analytics, a deterministic simulated
network and a PDR load harness.
"""

__version__ = "0.1.0"

from .codec import (
    ErrorEstimate,
    NtpTimestamp,
    ReflectorTestPayload,
    SegmentRoutingHeader,
    SenderTestPayload,
    TestDatagram,
    build_test_datagram,
    parse_test_datagram,
)
from .control import ControlClient, Controller, ControlServer, LocalChannel, NodeService, TcpChannel
from .errors import StampError
from .node import NodeGlobalConfig
from .reflector import ReflectorSessionConfig, SessionReflector
from .sender import MeasurementRecord, SessionConfig, SessionSender
from .timebase import HostClock, SimClock, ntp_diff
from .transport import SimLink, SimNetwork, UdpTransport

__all__ = [
    "ControlClient", "ControlServer", "Controller", "ErrorEstimate", "HostClock", "LocalChannel",
    "MeasurementRecord", "NodeGlobalConfig", "NodeService", "NtpTimestamp", "ReflectorSessionConfig",
    "ReflectorTestPayload", "SegmentRoutingHeader", "SenderTestPayload", "SessionConfig",
    "SessionReflector", "SessionSender", "SimClock", "SimLink", "SimNetwork", "StampError",
    "TcpChannel", "TestDatagram", "UdpTransport", "build_test_datagram", "ntp_diff",
    "parse_test_datagram",
]
