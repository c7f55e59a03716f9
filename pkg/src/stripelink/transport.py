"""Channel setup and framed, optionally paced, I/O over pluggable links.

A :class:`Channel` runs the library's frame protocol over a :class:`Link`,
which is a real TCP socket in production (:class:`SocketLink`) or an
in-process emulated wire from :mod:`stripelink.testkit` in tests. Opening a
channel dials or accepts, applies socket tuning, and exchanges hello frames
so cross-wired multi-port setups fail loudly instead of corrupting data.

Concurrency contract: a channel supports one in-flight send and one
in-flight receive at the same time (full duplex). Concurrent sends on the
same channel are serialized by an internal lock, as are concurrent
receives. Distinct channels are fully independent.
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

from . import core
from .core import ChannelConfig, Frame, FrameKind, Role
from .errors import (
    AddressInUse,
    ChannelClosed,
    ConnectTimeout,
    HandshakeMismatch,
    IoFailure,
    MalformedHeader,
    OpenAborted,
    SizeLimitExceeded,
)

log = logging.getLogger(__name__)

PACE_MIN_SLICE = 64 * 1024
# At most one combined header+payload write below this size; above it the
# header and payload are written separately to avoid copying the payload.
_COMBINE_WRITE_MAX = 256 * 1024
_DRAIN_CHUNK = 256 * 1024
_READ_CHUNK = 1 << 20

_HELLO = struct.Struct(">BQB")
ROLE_MARKERS = {Role.CONNECT: 0, Role.ACCEPT: 1}


@dataclass(frozen=True)
class BufferReport:
    """Requested vs. granted socket buffer sizes (the OS may clamp)."""

    requested_send: int | None
    granted_send: int | None
    requested_recv: int | None
    granted_recv: int | None


@runtime_checkable
class Link(Protocol):
    """Byte-stream endpoint a channel runs its frame protocol over.

    ``write_all`` either transfers every byte or raises; ``read_exact`` /
    ``read_into`` either produce exactly the requested bytes or raise.
    After ``close`` every operation raises :class:`ChannelClosed`.
    """

    def write_all(self, data) -> None: ...

    def read_exact(self, n: int) -> bytes: ...

    def read_into(self, view: memoryview) -> None: ...

    def close(self) -> None: ...

    def set_buffer_sizes(self, send: int | None, recv: int | None) -> None: ...

    def buffer_report(self) -> BufferReport: ...

    def peer_description(self) -> str: ...


class SocketLink:
    """Link over a connected stream socket."""

    def __init__(self, sock: socket.socket, peer_desc: str | None = None):
        self._sock = sock
        self._closed = False
        self._requested_send: int | None = None
        self._requested_recv: int | None = None
        if peer_desc is None:
            try:
                peer = sock.getpeername()
                peer_desc = f"{peer[0]}:{peer[1]}" if isinstance(peer, tuple) else str(peer)
            except OSError:
                peer_desc = "<unknown>"
        self._peer_desc = peer_desc

    def write_all(self, data) -> None:
        if self._closed:
            raise ChannelClosed("link is closed")
        try:
            self._sock.sendall(data)
        except OSError as exc:
            if self._closed:
                raise ChannelClosed("link is closed") from exc
            raise IoFailure(f"send to {self._peer_desc} failed: {exc}") from exc

    def read_into(self, view: memoryview) -> None:
        pos = 0
        n = len(view)
        while pos < n:
            if self._closed:
                raise ChannelClosed("link is closed")
            try:
                got = self._sock.recv_into(view[pos:pos + min(_READ_CHUNK, n - pos)])
            except OSError as exc:
                if self._closed:
                    raise ChannelClosed("link is closed") from exc
                raise IoFailure(f"recv from {self._peer_desc} failed: {exc}") from exc
            if got == 0:
                if pos == 0:
                    raise ChannelClosed(f"{self._peer_desc} closed the connection")
                raise IoFailure(f"stream from {self._peer_desc} ended mid-read ({pos}/{n} bytes)")
            pos += got

    def read_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        if n:
            self.read_into(memoryview(buf))
        return bytes(buf)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass

    def set_buffer_sizes(self, send: int | None, recv: int | None) -> None:
        if send is not None:
            self._requested_send = send
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, send)
        if recv is not None:
            self._requested_recv = recv
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, recv)

    def buffer_report(self) -> BufferReport:
        try:
            granted_send = self._sock.getsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF)
            granted_recv = self._sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF)
        except OSError:
            granted_send = granted_recv = None
        return BufferReport(self._requested_send, granted_send, self._requested_recv, granted_recv)

    def peer_description(self) -> str:
        return self._peer_desc

    def set_read_timeout(self, seconds: float | None) -> None:
        try:
            self._sock.settimeout(seconds)
        except OSError:
            pass


class TokenBucket:
    """Token bucket limiting the long-run byte rate of paced sends.

    Capacity equals one pacing slice, so at most one slice can burst after
    an idle period. Single-consumer: callers already hold the channel's
    send lock.
    """

    def __init__(self, rate_bytes_per_sec: float, capacity_bytes: int):
        self.rate = float(rate_bytes_per_sec)
        self.capacity = capacity_bytes
        self.tokens = float(capacity_bytes)
        self.stamp = time.monotonic()

    def consume(self, n: int) -> None:
        while True:
            now = time.monotonic()
            self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
            self.stamp = now
            if self.tokens >= n:
                self.tokens -= n
                return
            time.sleep((n - self.tokens) / self.rate)


def pace_slice_bytes(rate_bytes_per_sec: int) -> int:
    """Slice size for paced writes: 20 ms of budget, at least 64 KiB."""
    return max(PACE_MIN_SLICE, rate_bytes_per_sec // 50)


class ChannelState(enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


class Channel:
    """One open bidirectional framed connection."""

    def __init__(self, channel_id: int, config: ChannelConfig, link: Link):
        self.id = channel_id
        self.config = config
        self.link = link
        self.state = ChannelState.OPEN
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self._state_lock = threading.Lock()
        rate = config.pace_bytes_per_sec
        self.pacer = TokenBucket(rate, pace_slice_bytes(rate)) if rate else None

    def _require_open(self) -> None:
        if self.state is not ChannelState.OPEN:
            raise ChannelClosed(f"channel {self.id} is closed", channel=self.id)

    def _mark_closed(self) -> None:
        with self._state_lock:
            if self.state is ChannelState.CLOSED:
                return
            self.state = ChannelState.CLOSED
        try:
            self.link.close()
        except Exception:
            log.debug("channel %d: error closing link", self.id, exc_info=True)

    def buffer_report(self) -> BufferReport:
        return self.link.buffer_report()

    def __repr__(self) -> str:
        return f"Channel(id={self.id}, state={self.state.value}, peer={self.link.peer_description()})"


class CancelToken:
    """Cooperative cancellation for concurrent channel opens.

    Sockets registered here are shut down when :meth:`cancel` fires, which
    makes blocked ``connect``/``accept`` calls fail promptly; the opener
    then raises :class:`OpenAborted`.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._sockets: set[socket.socket] = set()
        self.cancelled = False

    def register(self, sock: socket.socket) -> None:
        with self._lock:
            if self.cancelled:
                _quiet_close(sock)
                raise OpenAborted("channel open cancelled")
            self._sockets.add(sock)

    def unregister(self, sock: socket.socket) -> None:
        with self._lock:
            self._sockets.discard(sock)

    def cancel(self) -> None:
        with self._lock:
            if self.cancelled:
                return
            self.cancelled = True
            pending = list(self._sockets)
            self._sockets.clear()
        for sock in pending:
            _quiet_close(sock)


def _quiet_close(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


def _configure_socket(sock: socket.socket, config: ChannelConfig) -> None:
    if config.tcp_nodelay and sock.family in (socket.AF_INET, socket.AF_INET6):
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
    if config.send_buffer_bytes is not None:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, config.send_buffer_bytes)
    if config.recv_buffer_bytes is not None:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, config.recv_buffer_bytes)


def _check_cancel(cancel: CancelToken | None, channel_id: int) -> None:
    if cancel is not None and cancel.cancelled:
        raise OpenAborted(f"channel {channel_id} open cancelled", channel=channel_id)


def _dial(config: ChannelConfig, channel_id: int, cancel: CancelToken | None) -> SocketLink:
    deadline = time.monotonic() + config.connect_timeout_ms / 1000.0
    backoff = config.retry_backoff_ms / 1000.0
    target = (config.peer_host, config.port)
    while True:
        _check_cancel(cancel, channel_id)
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise ConnectTimeout(
                f"channel {channel_id}: no connection to {target[0]}:{target[1]} "
                f"within {config.connect_timeout_ms} ms",
                channel=channel_id,
            )
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            _configure_socket(sock, config)
            sock.settimeout(remaining)
            if cancel is not None:
                cancel.register(sock)
            sock.connect(target)
            break
        except OSError as exc:
            if cancel is not None:
                cancel.unregister(sock)
            _quiet_close(sock)
            _check_cancel(cancel, channel_id)
            if time.monotonic() + backoff >= deadline:
                raise ConnectTimeout(
                    f"channel {channel_id}: no connection to {target[0]}:{target[1]} "
                    f"within {config.connect_timeout_ms} ms (last error: {exc})",
                    channel=channel_id,
                ) from exc
            time.sleep(backoff)
    # sock stays registered with the cancel token through the handshake
    return SocketLink(sock, f"{config.peer_host}:{config.port}")


def _listen_accept(config: ChannelConfig, channel_id: int, cancel: CancelToken | None) -> SocketLink:
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        _configure_socket(listener, config)
        try:
            listener.bind(("", config.port))
        except OSError as exc:
            raise AddressInUse(
                f"channel {channel_id}: cannot bind port {config.port}: {exc}",
                channel=channel_id,
            ) from exc
        listener.listen(1)
        listener.settimeout(config.connect_timeout_ms / 1000.0)
        if cancel is not None:
            cancel.register(listener)
        try:
            conn, addr = listener.accept()
        except socket.timeout as exc:
            raise ConnectTimeout(
                f"channel {channel_id}: no peer connected to port {config.port} "
                f"within {config.connect_timeout_ms} ms",
                channel=channel_id,
            ) from exc
        except OSError as exc:
            _check_cancel(cancel, channel_id)
            raise IoFailure(f"channel {channel_id}: accept failed: {exc}", channel=channel_id) from exc
    finally:
        if cancel is not None:
            cancel.unregister(listener)
        _quiet_close(listener)
    _configure_socket(conn, config)
    conn.settimeout(config.connect_timeout_ms / 1000.0)
    link = SocketLink(conn, f"{addr[0]}:{addr[1]}")
    if cancel is not None:
        cancel.register(conn)
    return link


def _handshake(link: Link, config: ChannelConfig, channel_id: int) -> None:
    wire_index = config.handshake_index if config.handshake_index is not None else channel_id
    mine = _HELLO.pack(core.FRAME_VERSION, wire_index, ROLE_MARKERS[config.role])
    link.write_all(core.encode_frame(FrameKind.HELLO, mine))
    header = link.read_exact(core.FRAME_HEADER_LEN)
    kind, payload_len = core.decode_frame_header(header)
    if kind is not FrameKind.HELLO:
        raise HandshakeMismatch(
            f"channel {channel_id}: expected hello frame, got {kind.name.lower()}",
            channel=channel_id,
        )
    version, peer_index, peer_marker = _HELLO.unpack(link.read_exact(payload_len))
    if version != core.FRAME_VERSION:
        raise HandshakeMismatch(
            f"channel {channel_id}: peer speaks protocol version {version}, expected {core.FRAME_VERSION}",
            channel=channel_id,
        )
    if peer_index != wire_index:
        raise HandshakeMismatch(
            f"channel {channel_id}: peer presented channel index {peer_index}, expected {wire_index}",
            channel=channel_id,
        )
    if peer_marker == ROLE_MARKERS[config.role]:
        raise HandshakeMismatch(
            f"channel {channel_id}: both endpoints opened with role {config.role.value}",
            channel=channel_id,
        )


def open_channel(
    config: ChannelConfig,
    channel_id: int,
    *,
    link: Link | None = None,
    cancel: CancelToken | None = None,
) -> Channel:
    """Open one channel: connect or accept, tune the socket, and handshake.

    A connect-role config retries with fixed backoff until
    ``connect_timeout_ms`` elapses; an accept-role config listens on its
    port and takes exactly one connection (the listener is then closed).
    Both sides exchange hello frames carrying the protocol version, the
    channel index, and a role marker, and verify they agree.

    An externally supplied ``link`` (e.g. a testkit wire) skips the socket
    setup but still runs the handshake.
    """
    own_socket = link is None
    if own_socket:
        if config.role is Role.CONNECT:
            link = _dial(config, channel_id, cancel)
        else:
            link = _listen_accept(config, channel_id, cancel)
    else:
        link.set_buffer_sizes(config.send_buffer_bytes, config.recv_buffer_bytes)
    try:
        _handshake(link, config, channel_id)
    except (socket.timeout, TimeoutError) as exc:
        link.close()
        raise ConnectTimeout(
            f"channel {channel_id}: peer did not complete the handshake in time",
            channel=channel_id,
        ) from exc
    except Exception:
        link.close()
        if cancel is not None and cancel.cancelled:
            raise OpenAborted(f"channel {channel_id} open cancelled", channel=channel_id) from None
        raise
    if own_socket:
        link.set_read_timeout(None)
        if cancel is not None:
            cancel.unregister(link._sock)
    return Channel(channel_id, config, link)


def _attribute(exc: Exception, channel: Channel) -> None:
    if isinstance(exc, (ChannelClosed, IoFailure, MalformedHeader, SizeLimitExceeded)):
        if exc.channel is None:
            exc.channel = channel.id
    if isinstance(exc, ChannelClosed):
        channel._mark_closed()


def send_frame(channel: Channel, kind: FrameKind, payload=b"") -> None:
    """Write one frame; paced channels feed the payload in rate-limited slices."""
    view = memoryview(payload)
    n = len(view)
    header = core.encode_frame_header(kind, n)
    with channel._send_lock:
        channel._require_open()
        try:
            if channel.pacer is None:
                if 0 < n <= _COMBINE_WRITE_MAX:
                    channel.link.write_all(header + bytes(view))
                else:
                    channel.link.write_all(header)
                    if n:
                        channel.link.write_all(view)
            else:
                slice_len = channel.pacer.capacity
                channel.pacer.consume(len(header))
                channel.link.write_all(header)
                for off in range(0, n, slice_len):
                    step = min(slice_len, n - off)
                    channel.pacer.consume(step)
                    channel.link.write_all(view[off:off + step])
        except Exception as exc:
            _attribute(exc, channel)
            raise


def recv_frame_header(channel: Channel) -> tuple[FrameKind, int]:
    """Read and validate one frame header.

    Receiving a close frame transitions the channel to the closed state
    (and returns ``(FrameKind.CLOSE, 0)`` so callers can observe it).
    """
    with channel._recv_lock:
        channel._require_open()
        try:
            header = channel.link.read_exact(core.FRAME_HEADER_LEN)
        except Exception as exc:
            _attribute(exc, channel)
            raise
        try:
            kind, payload_len = core.decode_frame_header(header)
        except MalformedHeader as exc:
            exc.channel = channel.id
            raise
    if kind is FrameKind.CLOSE:
        channel._mark_closed()
    return kind, payload_len


def recv_payload_into(channel: Channel, view: memoryview) -> None:
    """Read exactly ``len(view)`` payload bytes into ``view``."""
    if not len(view):
        return
    with channel._recv_lock:
        try:
            channel.link.read_into(view)
        except Exception as exc:
            _attribute(exc, channel)
            raise


def drain_payload(channel: Channel, nbytes: int) -> None:
    """Read and discard ``nbytes`` so the frame stream stays synchronized."""
    if nbytes <= 0:
        return
    scratch = bytearray(min(nbytes, _DRAIN_CHUNK))
    view = memoryview(scratch)
    remaining = nbytes
    with channel._recv_lock:
        try:
            while remaining > 0:
                step = min(remaining, len(scratch))
                channel.link.read_into(view[:step])
                remaining -= step
        except Exception as exc:
            _attribute(exc, channel)
            raise


def recv_frame(channel: Channel, max_payload: int) -> Frame:
    """Read one complete frame, enforcing ``max_payload``.

    Oversized frames are drained off the wire before
    :class:`SizeLimitExceeded` is raised, so the next frame remains
    readable.
    """
    kind, payload_len = recv_frame_header(channel)
    if kind is FrameKind.CLOSE:
        return Frame(FrameKind.CLOSE)
    if payload_len > max_payload:
        drain_payload(channel, payload_len)
        raise SizeLimitExceeded(actual=payload_len, limit=max_payload, channel=channel.id)
    if payload_len == 0:
        return Frame(kind)
    buf = bytearray(payload_len)
    recv_payload_into(channel, memoryview(buf))
    return Frame(kind, bytes(buf))


def close_channel(channel: Channel) -> None:
    """Close a channel: best-effort close frame, then link teardown.

    Idempotent; errors during close are logged and swallowed.
    """
    with channel._state_lock:
        if channel.state is ChannelState.CLOSED:
            return
        channel.state = ChannelState.CLOSED
    # Best effort: skip the close frame rather than block behind a large
    # in-flight send.
    if channel._send_lock.acquire(timeout=0.2):
        try:
            channel.link.write_all(core.encode_frame(FrameKind.CLOSE))
        except Exception:
            log.debug("channel %d: close frame not sent", channel.id, exc_info=True)
        finally:
            channel._send_lock.release()
    try:
        channel.link.close()
    except Exception:
        log.debug("channel %d: error closing link", channel.id, exc_info=True)
