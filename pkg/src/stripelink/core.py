"""Transport-independent domain logic.

Channel and path descriptors, the wire frame format, deterministic message
striping, and the mean / standard-error statistics used by the benchmark
harness. Everything in this module is a pure function over immutable values
and is safe to call from any number of threads.

Wire frame format (bit-exact)::

    offset  size  field
    0       1     version, always 1
    1       1     kind: 0=data, 1=barrier, 2=hello, 3=close
    2       8     payload length, unsigned big-endian
    10      n     payload bytes

Barrier and close frames carry no payload; hello payloads are exactly
10 bytes. Payload lengths above 2**40 are rejected as corrupt.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    InsufficientSamples,
    InvalidConfig,
    MalformedHeader,
    PayloadTooLarge,
    TruncatedFrame,
    UnknownFrameKind,
    VersionMismatch,
)

FRAME_VERSION = 1
FRAME_HEADER_LEN = 10
PAYLOAD_LEN_CAP = 1 << 40
HELLO_PAYLOAD_LEN = 10

_HEADER = struct.Struct(">BBQ")


class Role(enum.Enum):
    """Which side of a channel this endpoint plays during setup."""

    CONNECT = "connect"
    ACCEPT = "accept"


class FrameKind(enum.IntEnum):
    DATA = 0
    BARRIER = 1
    HELLO = 2
    CLOSE = 3


_EMPTY_PAYLOAD_KINDS = frozenset({FrameKind.BARRIER, FrameKind.CLOSE})
_KIND_VALUES = frozenset(k.value for k in FrameKind)


@dataclass(frozen=True)
class ChannelConfig:
    """Static description of one stream-socket channel endpoint.

    A connect-role config dials ``peer_host:port``; an accept-role config
    listens on ``port`` on all interfaces and must not name a peer host.
    Buffer sizes and the pacing rate are optional tuning knobs applied to
    the underlying socket; ``tcp_nodelay`` defaults to on so small frames
    are not delayed by Nagle's algorithm.

    ``handshake_index`` is the channel identity presented to (and checked
    against) the peer during setup. It defaults to the local channel id;
    override it when the two processes number a shared channel differently
    (a relay or a multi-party topology, where each process counts its own
    channels from zero).
    """

    port: int
    role: Role
    peer_host: str | None = None
    send_buffer_bytes: int | None = None
    recv_buffer_bytes: int | None = None
    pace_bytes_per_sec: int | None = None
    connect_timeout_ms: int = 30_000
    retry_backoff_ms: int = 250
    tcp_nodelay: bool = True
    handshake_index: int | None = None

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise InvalidConfig(f"port {self.port} outside 1-65535")
        if not isinstance(self.role, Role):
            raise InvalidConfig(f"role must be a Role, got {self.role!r}")
        if self.role is Role.CONNECT and not self.peer_host:
            raise InvalidConfig("connect-role channel requires peer_host")
        if self.role is Role.ACCEPT and self.peer_host is not None:
            raise InvalidConfig("accept-role channel listens on all interfaces; peer_host must be unset")
        for name in ("send_buffer_bytes", "recv_buffer_bytes", "pace_bytes_per_sec"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise InvalidConfig(f"{name} must be strictly positive, got {value}")
        if self.connect_timeout_ms <= 0:
            raise InvalidConfig("connect_timeout_ms must be positive")
        if self.retry_backoff_ms <= 0:
            raise InvalidConfig("retry_backoff_ms must be positive")
        if self.handshake_index is not None and self.handshake_index < 0:
            raise InvalidConfig("handshake_index is non-negative")

    @classmethod
    def connect(cls, peer_host: str, port: int, **kwargs) -> "ChannelConfig":
        return cls(port=port, role=Role.CONNECT, peer_host=peer_host, **kwargs)

    @classmethod
    def accept(cls, port: int, **kwargs) -> "ChannelConfig":
        return cls(port=port, role=Role.ACCEPT, **kwargs)


@dataclass(frozen=True)
class Path:
    """An ordered, duplicate-free, non-empty set of channel ids.

    A path is the unit of collective transfers: one message is striped
    across its channels, one chunk per channel, in this order.
    """

    channels: tuple[int, ...]

    def __post_init__(self):
        if not self.channels:
            raise InvalidConfig("path must reference at least one channel")
        if len(set(self.channels)) != len(self.channels):
            raise InvalidConfig(f"path contains duplicate channel ids: {self.channels}")
        if any(cid < 0 for cid in self.channels):
            raise InvalidConfig("channel ids are non-negative")

    @classmethod
    def of(cls, spec: "Path" | Iterable[int]) -> "Path":
        if isinstance(spec, Path):
            return spec
        return cls(tuple(int(c) for c in spec))

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)


@dataclass(frozen=True)
class Frame:
    """One decoded wire unit. The version byte is implied (always 1)."""

    kind: FrameKind
    payload: bytes = b""


def _check_kind_payload(kind: FrameKind, payload_len: int) -> None:
    if payload_len > PAYLOAD_LEN_CAP:
        raise PayloadTooLarge(f"payload length {payload_len} exceeds cap {PAYLOAD_LEN_CAP}")
    if kind in _EMPTY_PAYLOAD_KINDS and payload_len != 0:
        raise MalformedHeader(f"{kind.name.lower()} frames carry no payload, got {payload_len} bytes")
    if kind is FrameKind.HELLO and payload_len != HELLO_PAYLOAD_LEN:
        raise MalformedHeader(f"hello payload must be {HELLO_PAYLOAD_LEN} bytes, got {payload_len}")


def encode_frame_header(kind: FrameKind, payload_len: int) -> bytes:
    """Build the 10-byte header for a frame of ``payload_len`` bytes."""
    kind = FrameKind(kind)
    if payload_len < 0:
        raise ValueError("payload length is non-negative")
    _check_kind_payload(kind, payload_len)
    return _HEADER.pack(FRAME_VERSION, kind, payload_len)


def encode_frame(kind: FrameKind, payload: bytes = b"") -> bytes:
    """Encode one complete frame (header plus payload) to bytes."""
    return encode_frame_header(kind, len(payload)) + bytes(payload)


def decode_frame_header(header: bytes) -> tuple[FrameKind, int]:
    """Validate a 10-byte header, returning its kind and payload length."""
    if len(header) < FRAME_HEADER_LEN:
        raise TruncatedFrame(f"header needs {FRAME_HEADER_LEN} bytes, got {len(header)}")
    version, kind_byte, payload_len = _HEADER.unpack(header[:FRAME_HEADER_LEN])
    if version != FRAME_VERSION:
        raise VersionMismatch(f"unsupported frame version {version}")
    if kind_byte not in _KIND_VALUES:
        raise UnknownFrameKind(f"unknown frame kind {kind_byte}")
    kind = FrameKind(kind_byte)
    _check_kind_payload(kind, payload_len)
    return kind, payload_len


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame from ``data``.

    Raises a distinct :class:`MalformedHeader` subclass for each defect:
    unsupported version, unknown kind, over-cap length, truncated input.
    Trailing bytes beyond the declared frame are also rejected.
    """
    kind, payload_len = decode_frame_header(data)
    body = data[FRAME_HEADER_LEN:]
    if len(body) < payload_len:
        raise TruncatedFrame(f"payload needs {payload_len} bytes, got {len(body)}")
    if len(body) > payload_len:
        raise MalformedHeader(f"{len(body) - payload_len} trailing bytes after frame")
    return Frame(kind, bytes(body))


@dataclass(frozen=True)
class StripeLayout:
    """Deterministic partition of ``total_len`` bytes across channels.

    ``chunks`` holds one ``(offset, length)`` pair per channel in path
    order. Chunks are contiguous, non-overlapping, cover ``[0, total_len)``
    exactly, and differ in length by at most one byte; remainder bytes go
    to the lowest-indexed channels so both ends of a path derive identical
    layouts with no negotiation.
    """

    total_len: int
    chunks: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.chunks)


def stripe_layout(total_len: int, n_channels: int) -> StripeLayout:
    """Split ``total_len`` bytes as evenly as possible over ``n_channels``.

    Chunk ``i`` gets ``total_len // n_channels`` bytes plus one extra byte
    when ``i < total_len % n_channels``. Zero-length chunks occur when the
    message is shorter than the path is wide.
    """
    if n_channels < 1:
        raise ValueError(f"need at least one channel, got {n_channels}")
    if total_len < 0:
        raise ValueError(f"total_len is non-negative, got {total_len}")
    base, rem = divmod(total_len, n_channels)
    chunks = []
    offset = 0
    for i in range(n_channels):
        length = base + (1 if i < rem else 0)
        chunks.append((offset, length))
        offset += length
    return StripeLayout(total_len, tuple(chunks))


def bench_stats(samples: Sequence[float]) -> tuple[float, float]:
    """Return (mean, standard error) of a sample series.

    The standard error is the sample standard deviation (n-1 denominator)
    divided by sqrt(n). At least two samples are required.
    """
    n = len(samples)
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    mean = math.fsum(samples) / n
    var = math.fsum((x - mean) ** 2 for x in samples) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


@dataclass(frozen=True)
class BenchRecord:
    """Result of one benchmark cell (a streams x message-size combination).

    ``samples_gbps`` holds one two-way throughput figure per timed
    exchange; ``mean_gbps`` and ``stderr_gbps`` summarize it. Cells that
    aborted mid-run are represented with ``status="failed"`` and no
    statistics.
    """

    streams: int
    msg_size_bytes: int
    iterations: int
    samples_gbps: tuple[float, ...]
    mean_gbps: float | None
    stderr_gbps: float | None
    status: str = "ok"

    @classmethod
    def from_samples(cls, streams: int, msg_size_bytes: int, samples: Sequence[float]) -> "BenchRecord":
        mean, stderr = bench_stats(samples)
        return cls(
            streams=streams,
            msg_size_bytes=msg_size_bytes,
            iterations=len(samples),
            samples_gbps=tuple(samples),
            mean_gbps=mean,
            stderr_gbps=stderr,
        )

    @classmethod
    def failed(cls, streams: int, msg_size_bytes: int) -> "BenchRecord":
        return cls(
            streams=streams,
            msg_size_bytes=msg_size_bytes,
            iterations=0,
            samples_gbps=(),
            mean_gbps=None,
            stderr_gbps=None,
            status="failed",
        )
