"""Striped message passing over parallel stream sockets.

Couples independently parallel applications over long-distance links by
splitting each message across a configurable set of concurrent channels.
Includes a user-space relay/forwarder for bridging unroutable networks, a
throughput benchmark harness, and an in-process impairment testkit.
"""

from . import testkit
from .api import Mpw, init
from .bench import BenchPlan, emit_csv, run_benchmark
from .core import (
    BenchRecord,
    ChannelConfig,
    Frame,
    FrameKind,
    Path,
    Role,
    StripeLayout,
    bench_stats,
    decode_frame,
    encode_frame,
    stripe_layout,
)
from .errors import (
    AddressInUse,
    ArityMismatch,
    ChannelClosed,
    ConfigError,
    ConnectTimeout,
    HandshakeMismatch,
    InitFailed,
    InstanceFinalized,
    InsufficientSamples,
    InvalidConfig,
    IoFailure,
    MalformedHeader,
    OverlappingPaths,
    PathError,
    PayloadTooLarge,
    PlanMismatch,
    RelayFailure,
    SizeLimitExceeded,
    StripeMismatch,
    StripelinkError,
    TruncatedFrame,
    UnknownFrameKind,
    VersionMismatch,
)
from .forwarder import RelayPair, relay
from .transport import BufferReport, Channel, Link, SocketLink

__version__ = "0.1.0"

__all__ = [
    "AddressInUse",
    "ArityMismatch",
    "BenchPlan",
    "BenchRecord",
    "BufferReport",
    "Channel",
    "ChannelClosed",
    "ChannelConfig",
    "ConfigError",
    "ConnectTimeout",
    "Frame",
    "FrameKind",
    "HandshakeMismatch",
    "InitFailed",
    "InstanceFinalized",
    "InsufficientSamples",
    "InvalidConfig",
    "IoFailure",
    "Link",
    "MalformedHeader",
    "Mpw",
    "OverlappingPaths",
    "Path",
    "PathError",
    "PayloadTooLarge",
    "PlanMismatch",
    "RelayFailure",
    "RelayPair",
    "Role",
    "SizeLimitExceeded",
    "SocketLink",
    "StripeLayout",
    "StripeMismatch",
    "StripelinkError",
    "TruncatedFrame",
    "UnknownFrameKind",
    "VersionMismatch",
    "bench_stats",
    "decode_frame",
    "emit_csv",
    "encode_frame",
    "init",
    "relay",
    "run_benchmark",
    "stripe_layout",
    "testkit",
]
