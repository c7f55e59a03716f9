"""Channel setup, framed I/O, size limits, pacing, close semantics."""

from __future__ import annotations

import random
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stripelink import (
    ChannelClosed,
    ChannelConfig,
    ConnectTimeout,
    FrameKind,
    HandshakeMismatch,
    SizeLimitExceeded,
)
from stripelink.transport import (
    Channel,
    SocketLink,
    TokenBucket,
    close_channel,
    open_channel,
    pace_slice_bytes,
    recv_frame,
    send_frame,
)

from conftest import free_ports, run_pair


def socketpair_channels(
    pace_a: int | None = None,
    handshake: bool = True,
) -> tuple[Channel, Channel]:
    """Two connected channels over an in-process socketpair."""
    sa, sb = socket.socketpair()
    cfg_a = ChannelConfig.connect("peer", 1, pace_bytes_per_sec=pace_a)
    cfg_b = ChannelConfig.accept(1)
    if not handshake:
        return Channel(0, cfg_a, SocketLink(sa, "pair:a")), Channel(0, cfg_b, SocketLink(sb, "pair:b"))
    out = {}

    def open_a():
        out["a"] = open_channel(cfg_a, 0, link=SocketLink(sa, "pair:a"))

    def open_b():
        out["b"] = open_channel(cfg_b, 0, link=SocketLink(sb, "pair:b"))

    ta = threading.Thread(target=open_a)
    tb = threading.Thread(target=open_b)
    ta.start(); tb.start(); ta.join(10); tb.join(10)
    return out["a"], out["b"]


class TestOpenChannel:
    def test_matched_pair_opens(self):
        (port,) = free_ports(1)

        def accept_side():
            return open_channel(ChannelConfig.accept(port, connect_timeout_ms=5000), 0)

        def connect_side():
            return open_channel(ChannelConfig.connect("127.0.0.1", port, connect_timeout_ms=5000), 0)

        ch_a, ch_b = run_pair(accept_side, connect_side, timeout=15)
        assert ch_a.state.value == "open" and ch_b.state.value == "open"
        close_channel(ch_a)
        close_channel(ch_b)

    def test_connect_timeout_to_dead_port(self):
        (port,) = free_ports(1)  # nobody listens
        cfg = ChannelConfig.connect("127.0.0.1", port, connect_timeout_ms=300, retry_backoff_ms=50)
        start = time.perf_counter()
        with pytest.raises(ConnectTimeout):
            open_channel(cfg, 0)
        assert time.perf_counter() - start >= 0.2

    def test_accept_timeout_without_peer(self):
        (port,) = free_ports(1)
        cfg = ChannelConfig.accept(port, connect_timeout_ms=300)
        with pytest.raises(ConnectTimeout):
            open_channel(cfg, 0)

    def test_handshake_index_mismatch(self):
        (port,) = free_ports(1)

        def accept_side():
            return open_channel(ChannelConfig.accept(port, connect_timeout_ms=5000), 4)

        def connect_side():
            return open_channel(ChannelConfig.connect("127.0.0.1", port, connect_timeout_ms=5000), 3)

        with pytest.raises(HandshakeMismatch):
            run_pair(accept_side, connect_side, timeout=20)

    def test_handshake_role_mismatch(self):
        # both claim the connect role over a pre-connected pair
        sa, sb = socket.socketpair()
        cfg = ChannelConfig.connect("p", 1)
        with pytest.raises(HandshakeMismatch):
            run_pair(
                lambda: open_channel(cfg, 0, link=SocketLink(sa, "pair:a")),
                lambda: open_channel(cfg, 0, link=SocketLink(sb, "pair:b")),
                timeout=20,
            )

    def test_handshake_version_mismatch(self):
        # a peer speaking a future protocol version is refused
        import struct

        from stripelink import FrameKind as FK
        from stripelink.core import encode_frame

        sa, sb = socket.socketpair()

        def forged_peer():
            sb.sendall(encode_frame(FK.HELLO, struct.pack(">BQB", 2, 0, 1)))
            sb.recv(64)
            sb.close()

        def opener():
            return open_channel(ChannelConfig.connect("p", 1), 0, link=SocketLink(sa, "pair:a"))

        with pytest.raises(HandshakeMismatch, match="version"):
            run_pair(forged_peer, opener, timeout=10)

    def test_retry_reaches_late_listener(self):
        (port,) = free_ports(1)

        def late_accept():
            time.sleep(0.4)
            return open_channel(ChannelConfig.accept(port, connect_timeout_ms=5000), 0)

        def eager_connect():
            return open_channel(
                ChannelConfig.connect("127.0.0.1", port, connect_timeout_ms=5000, retry_backoff_ms=100), 0
            )

        ch_a, ch_b = run_pair(late_accept, eager_connect, timeout=15)
        close_channel(ch_a)
        close_channel(ch_b)


class TestFrames:
    def test_round_trip_one_mib(self):
        a, b = socketpair_channels()
        payload = random.Random(1).randbytes(1 << 20)

        def tx():
            send_frame(a, FrameKind.DATA, payload)

        def rx():
            return recv_frame(b, 1 << 21)

        _, frame = run_pair(tx, rx)
        assert frame.kind is FrameKind.DATA
        assert frame.payload == payload
        close_channel(a); close_channel(b)

    def test_barrier_frame(self):
        a, b = socketpair_channels()
        send_frame(a, FrameKind.BARRIER)
        frame = recv_frame(b, 0)
        assert frame.kind is FrameKind.BARRIER and frame.payload == b""
        close_channel(a); close_channel(b)

    def test_known_size_message(self):
        a, b = socketpair_channels()
        send_frame(a, FrameKind.DATA, b"m" * 100)
        frame = recv_frame(b, 1000)
        assert frame.kind is FrameKind.DATA and len(frame.payload) == 100
        close_channel(a); close_channel(b)

    def test_size_limit_keeps_stream_synchronized(self):
        a, b = socketpair_channels()
        send_frame(a, FrameKind.DATA, b"x" * 2000)
        send_frame(a, FrameKind.DATA, b"next")
        with pytest.raises(SizeLimitExceeded) as excinfo:
            recv_frame(b, 1000)
        assert excinfo.value.actual == 2000
        assert excinfo.value.limit == 1000
        follow_up = recv_frame(b, 1000)
        assert follow_up.payload == b"next"
        close_channel(a); close_channel(b)

    @given(sizes=st.lists(st.integers(min_value=0, max_value=5000), min_size=1, max_size=8),
           oversize_at=st.integers(min_value=0, max_value=7))
    @settings(max_examples=25, deadline=None)
    def test_stream_sync_property(self, sizes, oversize_at):
        # one oversized frame in a random sequence; all others decode fine
        a, b = socketpair_channels()
        limit = 6000
        oversize_at = oversize_at % len(sizes)
        payloads = [bytes([i % 251]) * n for i, n in enumerate(sizes)]
        payloads[oversize_at] = b"!" * (limit + 1000)

        def tx():
            for p in payloads:
                send_frame(a, FrameKind.DATA, p)

        def rx():
            got = []
            for i in range(len(payloads)):
                try:
                    got.append(recv_frame(b, limit).payload)
                except SizeLimitExceeded:
                    got.append(None)
            return got

        _, got = run_pair(tx, rx)
        for i, p in enumerate(payloads):
            if i == oversize_at:
                assert got[i] is None
            else:
                assert got[i] == p
        close_channel(a); close_channel(b)

    def test_send_after_close(self):
        a, b = socketpair_channels()
        close_channel(a)
        with pytest.raises(ChannelClosed):
            send_frame(a, FrameKind.DATA, b"late")
        close_channel(b)

    def test_close_is_idempotent(self):
        a, b = socketpair_channels()
        close_channel(a)
        close_channel(a)  # no-op
        close_channel(b)

    def test_peer_sees_close_frame_or_closed(self):
        a, b = socketpair_channels()
        close_channel(a)
        try:
            frame = recv_frame(b, 0)
            assert frame.kind is FrameKind.CLOSE
        except ChannelClosed:
            pass
        close_channel(b)

    def test_close_unblocks_peer_recv_within_a_second(self):
        a, b = socketpair_channels()
        started = threading.Event()

        def blocked_recv():
            started.set()
            t0 = time.perf_counter()
            try:
                frame = recv_frame(b, 1 << 20)
                assert frame.kind is FrameKind.CLOSE
            except ChannelClosed:
                pass
            return time.perf_counter() - t0

        def closer():
            started.wait(5)
            time.sleep(0.1)
            close_channel(a)

        _, waited = run_pair(closer, blocked_recv, timeout=10)
        assert waited < 1.0
        close_channel(b)


class TestPacing:
    def test_slice_size_rule(self):
        assert pace_slice_bytes(1) == 64 * 1024
        assert pace_slice_bytes(50 * 10 * 2**20) == 10 * 2**20

    def test_token_bucket_long_run_rate(self):
        bucket = TokenBucket(rate_bytes_per_sec=1_000_000, capacity_bytes=64 * 1024)
        start = time.perf_counter()
        total = 0
        while total < 500_000:
            bucket.consume(50_000)
            total += 50_000
        elapsed = time.perf_counter() - start
        # first capacity burst shaves ~65 ms off the ideal 0.5 s
        assert 0.3 <= elapsed <= 0.8

    @pytest.mark.slow
    def test_paced_five_mib_at_one_mib_per_second(self):
        a, b = socketpair_channels(pace_a=1 << 20)
        payload = b"p" * (5 << 20)

        def tx():
            t0 = time.perf_counter()
            send_frame(a, FrameKind.DATA, payload)
            return time.perf_counter() - t0

        def rx():
            return recv_frame(b, 6 << 20)

        elapsed, frame = run_pair(tx, rx, timeout=30)
        assert frame.payload == payload
        assert 4.0 <= elapsed <= 6.5
        close_channel(a); close_channel(b)


class TestBufferReport:
    def test_requested_and_granted_reported(self):
        (port,) = free_ports(1)
        req = 1 << 17

        def accept_side():
            return open_channel(
                ChannelConfig.accept(port, connect_timeout_ms=5000,
                                     send_buffer_bytes=req, recv_buffer_bytes=req), 0
            )

        def connect_side():
            return open_channel(ChannelConfig.connect("127.0.0.1", port, connect_timeout_ms=5000), 0)

        ch_a, ch_b = run_pair(accept_side, connect_side, timeout=15)
        report = ch_a.buffer_report()
        assert report.granted_send is not None and report.granted_send > 0
        assert report.granted_recv is not None and report.granted_recv > 0
        # the kernel may clamp or round, but the setting must have applied
        assert report.granted_send >= req or report.granted_send > 0
        close_channel(ch_a); close_channel(ch_b)


class TestReopen:
    def test_reopen_same_port_round_trips(self):
        (port,) = free_ports(1)
        cfg_a = ChannelConfig.accept(port, connect_timeout_ms=5000)
        cfg_b = ChannelConfig.connect("127.0.0.1", port, connect_timeout_ms=5000)

        def side_a():
            ch = open_channel(cfg_a, 0)
            close_channel(ch)
            ch = open_channel(cfg_a, 0)
            send_frame(ch, FrameKind.DATA, b"again")
            close_channel(ch)

        def side_b():
            ch = open_channel(cfg_b, 0)
            close_channel(ch)
            ch = open_channel(cfg_b, 0)
            frame = recv_frame(ch, 100)
            close_channel(ch)
            return frame.payload

        _, payload = run_pair(side_a, side_b, timeout=20)
        assert payload == b"again"
