"""Deterministic in-process links with injectable network impairments.

These links implement the same contract as the socket transport, so the
whole message-passing stack can run against an emulated wire with fixed
one-way latency, a per-channel serialization rate cap, scheduled delivery
stalls, and forced disconnects. Impairments act on the byte stream, not on
packets: stream sockets already hide loss and reordering from the library,
and a stall is exactly what a packet-loss recovery episode looks like from
up here.

The rate cap models one serialization resource per channel, shared by the
two directions (like a fixed-capacity circuit), so a two-way exchange of S
bytes each way over a cap of R bits/s takes ``2*S*8/R`` seconds. Byte
offsets for stalls and disconnects count everything written in one
direction, including the 20-byte hello exchange performed at channel open.

Timing uses the wall clock with generous tolerances; content delivery is
exactly deterministic even though timing jitters.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from . import api, transport
from .core import ChannelConfig, Path
from .errors import ChannelClosed, InvalidConfig, IoFailure
from .transport import BufferReport

_pair_counter = itertools.count()


@dataclass(frozen=True)
class ImpairmentProfile:
    """What is wrong with this wire.

    stall_schedule entries are ``(byte_offset, stall_ms)``: delivery pauses
    for ``stall_ms`` once the writer reaches ``byte_offset`` in its stream.
    ``disconnect_after_bytes`` hard-closes both endpoints once one
    direction has carried that many bytes.
    """

    one_way_latency_ms: float = 0.0
    per_stream_cap_bits_per_sec: float | None = None
    stall_schedule: tuple[tuple[int, float], ...] = ()
    disconnect_after_bytes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stall_schedule", tuple((int(o), float(d)) for o, d in self.stall_schedule))
        if self.one_way_latency_ms < 0:
            raise InvalidConfig("latency is non-negative")
        if self.per_stream_cap_bits_per_sec is not None and self.per_stream_cap_bits_per_sec <= 0:
            raise InvalidConfig("rate cap must be positive")
        offsets = [o for o, _ in self.stall_schedule]
        if any(o < 0 for o in offsets):
            raise InvalidConfig("stall offsets are non-negative")
        if any(b >= a for a, b in zip(offsets[1:], offsets)):
            raise InvalidConfig("stall offsets must be strictly increasing")
        if any(d < 0 for _, d in self.stall_schedule):
            raise InvalidConfig("stall durations are non-negative")
        if self.disconnect_after_bytes is not None and self.disconnect_after_bytes < 0:
            raise InvalidConfig("disconnect threshold is non-negative")


class _RateGate:
    """Shared serialization resource: both directions drain one capacity.

    Capped writers book the gate one slice at a time and wait for their
    previous slice to start serializing before booking the next, so two
    concurrent directions interleave (approximate fair sharing) while a
    lone direction still achieves the full rate.
    """

    def __init__(self, bits_per_sec: float | None):
        self._bps = bits_per_sec
        self._busy_until = 0.0
        self._lock = threading.Lock()
        # ~20 ms of serialization per slice, no smaller than 64 KiB
        self.slice_bytes = max(64 * 1024, int(bits_per_sec / 8 // 50)) if bits_per_sec else 0

    @property
    def capped(self) -> bool:
        return self._bps is not None

    def schedule(self, nbytes: int, extra_delay: float, now: float) -> tuple[float, float]:
        """Reserve wire time for ``nbytes``; returns (start, completion)."""
        with self._lock:
            start = max(now, self._busy_until) + extra_delay
            duration = (nbytes * 8.0 / self._bps) if self._bps else 0.0
            self._busy_until = start + duration
            return start, self._busy_until


class _Wire:
    """One direction of an emulated channel: a FIFO of timed segments."""

    def __init__(self, gate: _RateGate, profile: ImpairmentProfile):
        self._gate = gate
        self._latency = profile.one_way_latency_ms / 1000.0
        self._stalls = deque(profile.stall_schedule)
        self._disconnect_at = profile.disconnect_after_bytes
        self._cond = threading.Condition()
        self._segments: deque[tuple[float, bytes]] = deque()
        self._head_pos = 0
        self._written = 0
        self._writer_closed = False
        self._reader_closed = False
        self._broken = False

    def write(self, data) -> bool:
        """Queue bytes for delivery. Returns True when the disconnect tripped.

        ``_written`` and ``_stalls`` are touched only by the single writer
        of this direction (one in-flight send per channel), so only the
        segment queue and state flags need the condition lock.
        """
        view = memoryview(data)
        n = len(view)
        pos = 0
        tripped = False
        while pos < n:
            offset = self._written
            stall = 0.0
            if self._stalls and self._stalls[0][0] == offset:
                stall = self._stalls.popleft()[1] / 1000.0
            end = n
            if self._gate.capped:
                end = min(end, pos + self._gate.slice_bytes)
            if self._stalls:
                end = min(end, pos + (self._stalls[0][0] - offset))
            if self._disconnect_at is not None:
                budget = self._disconnect_at - offset
                if budget <= 0:
                    tripped = True
                    break
                end = min(end, pos + budget)
            segment = bytes(view[pos:end])
            start, finish = self._gate.schedule(len(segment), stall, time.monotonic())
            ready = finish + self._latency
            with self._cond:
                if self._broken or self._writer_closed or self._reader_closed:
                    raise ChannelClosed("emulated wire is closed")
                self._segments.append((ready, segment))
                self._cond.notify_all()
            self._written += end - pos
            pos = end
            if self._disconnect_at is not None and self._written >= self._disconnect_at:
                tripped = True
                break
            if self._gate.capped and pos < n:
                # bounded write-ahead: book the next slice once this one
                # starts serializing, leaving room for the other direction
                delay = start - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        if tripped:
            with self._cond:
                self._broken = True
                self._cond.notify_all()
        return tripped

    def read_into(self, view: memoryview) -> None:
        n = len(view)
        pos = 0
        with self._cond:
            while pos < n:
                if self._reader_closed:
                    raise ChannelClosed("emulated wire is closed")
                if self._segments:
                    ready, data = self._segments[0]
                    wait = ready - time.monotonic()
                    if wait > 0:
                        self._cond.wait(wait)
                        continue
                    take = min(len(data) - self._head_pos, n - pos)
                    view[pos:pos + take] = data[self._head_pos:self._head_pos + take]
                    pos += take
                    self._head_pos += take
                    if self._head_pos == len(data):
                        self._segments.popleft()
                        self._head_pos = 0
                elif self._broken or self._writer_closed:
                    if pos == 0:
                        raise ChannelClosed("peer endpoint closed the emulated wire")
                    raise IoFailure(f"emulated wire ended mid-read ({pos}/{n} bytes)")
                else:
                    self._cond.wait()

    def mark_broken(self) -> None:
        with self._cond:
            self._broken = True
            self._cond.notify_all()

    def close_writer(self) -> None:
        with self._cond:
            self._writer_closed = True
            self._cond.notify_all()

    def close_reader(self) -> None:
        with self._cond:
            self._reader_closed = True
            self._cond.notify_all()


class MemoryLink:
    """In-process Link endpoint; see :class:`stripelink.transport.Link`."""

    def __init__(self, out_wire: _Wire, in_wire: _Wire, desc: str):
        self._out = out_wire
        self._in = in_wire
        self._desc = desc
        self._closed = False
        self._requested_send: int | None = None
        self._requested_recv: int | None = None

    def write_all(self, data) -> None:
        if self._closed:
            raise ChannelClosed("link is closed")
        if self._out.write(data):
            # disconnect threshold crossed: both ends go down
            self._in.mark_broken()
            raise ChannelClosed("emulated wire disconnected")

    def read_into(self, view: memoryview) -> None:
        if self._closed:
            raise ChannelClosed("link is closed")
        if len(view):
            self._in.read_into(view)

    def read_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        self.read_into(memoryview(buf))
        return bytes(buf)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._out.close_writer()
        self._in.close_reader()

    def set_buffer_sizes(self, send: int | None, recv: int | None) -> None:
        # emulated wire has no kernel buffers; record requests verbatim
        if send is not None:
            self._requested_send = send
        if recv is not None:
            self._requested_recv = recv

    def buffer_report(self) -> BufferReport:
        return BufferReport(self._requested_send, self._requested_send,
                            self._requested_recv, self._requested_recv)

    def peer_description(self) -> str:
        return self._desc


def impaired_pair(profile: ImpairmentProfile | None = None) -> tuple[MemoryLink, MemoryLink]:
    """Two connected in-process link endpoints sharing one impaired wire."""
    profile = profile or ImpairmentProfile()
    pair_id = next(_pair_counter)
    gate = _RateGate(profile.per_stream_cap_bits_per_sec)
    a_to_b = _Wire(gate, profile)
    b_to_a = _Wire(gate, profile)
    link_a = MemoryLink(a_to_b, b_to_a, f"memory:{pair_id}:b")
    link_b = MemoryLink(b_to_a, a_to_b, f"memory:{pair_id}:a")
    return link_a, link_b


def _paired_configs(n: int) -> tuple[list[ChannelConfig], list[ChannelConfig]]:
    side_a = [ChannelConfig.connect("testkit", 1 + i) for i in range(n)]
    side_b = [ChannelConfig.accept(1 + i) for i in range(n)]
    return side_a, side_b


def mpw_pair(
    profiles: ImpairmentProfile | Sequence[ImpairmentProfile] | None = None,
    n_channels: int | None = None,
) -> tuple[api.Mpw, api.Mpw]:
    """Two connected library instances wired over emulated channels.

    Pass one profile (applied to every channel, ``n_channels`` selects the
    width) or a sequence with one profile per channel.
    """
    if profiles is None or isinstance(profiles, ImpairmentProfile):
        width = n_channels or 1
        per_channel = [profiles or ImpairmentProfile()] * width
    else:
        per_channel = list(profiles)
        if n_channels is not None and n_channels != len(per_channel):
            raise InvalidConfig("n_channels disagrees with the profile list")
    links = [impaired_pair(p) for p in per_channel]
    configs_a, configs_b = _paired_configs(len(per_channel))
    result: dict[str, api.Mpw] = {}
    errors: dict[str, Exception] = {}

    def opener(side: str, configs, side_links):
        try:
            result[side] = api.init(configs, links=side_links)
        except Exception as exc:  # surfaced below
            errors[side] = exc

    threads = [
        threading.Thread(target=opener, args=("a", configs_a, [la for la, _ in links]), daemon=True),
        threading.Thread(target=opener, args=("b", configs_b, [lb for _, lb in links]), daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise next(iter(errors.values()))
    return result["a"], result["b"]


class MemoryFabric:
    """Hands matched emulated link endpoints to two cooperating sides.

    Both sides must request channels in the same order (the benchmark's
    lockstep cell protocol guarantees this); the k-th request for a given
    (offset, index) key on each side is served from the same freshly
    created pair.
    """

    def __init__(self, profile: ImpairmentProfile | None = None):
        self._profile = profile or ImpairmentProfile()
        self._lock = threading.Lock()
        self._pairs: dict[tuple[int, int], list[tuple[MemoryLink, MemoryLink]]] = {}
        self._claims: dict[tuple[int, int, str], int] = {}

    def _get(self, key: tuple[int, int], side: str) -> MemoryLink:
        with self._lock:
            claim = self._claims.get((*key, side), 0)
            self._claims[(*key, side)] = claim + 1
            pairs = self._pairs.setdefault(key, [])
            while len(pairs) <= claim:
                pairs.append(impaired_pair(self._profile))
            pair = pairs[claim]
        return pair[0] if side == "a" else pair[1]

    def connector(self, side: str):
        """A ``(n_channels, port_offset) -> Mpw`` opener for one side."""
        if side not in ("a", "b"):
            raise InvalidConfig("side must be 'a' or 'b'")

        def open_path(n_channels: int, port_offset: int) -> api.Mpw:
            links = [self._get((port_offset, i), side) for i in range(n_channels)]
            configs_a, configs_b = _paired_configs(n_channels)
            configs = configs_a if side == "a" else configs_b
            return api.init(configs, links=links)

        return open_path


@dataclass(frozen=True)
class ScalingResult:
    """Aggregate throughput of one capped multi-stream exchange."""

    throughput_bits_per_sec: float
    degenerate: bool = False


def capped_scaling_scenario(
    n_streams: int,
    cap_bits_per_sec: float,
    msg_bytes: int = 8 * 2**20,
) -> ScalingResult:
    """Measure aggregate one-way throughput over ``n_streams`` capped wires.

    One fixed-size message is striped across ``n_streams`` channels, each
    capped at ``cap_bits_per_sec``; the receive-side wall time gives the
    aggregate rate. A zero-byte message completes immediately and reports a
    degenerate zero throughput.
    """
    if n_streams < 1:
        raise InvalidConfig("need at least one stream")
    profile = ImpairmentProfile(per_stream_cap_bits_per_sec=cap_bits_per_sec)
    sender, receiver = mpw_pair(profile, n_channels=n_streams)
    path = Path.of(range(n_streams))
    payload = b"\xa5" * msg_bytes
    duration = 0.0

    def send_side():
        sender.barrier(path)
        sender.send(payload, path)

    def recv_side():
        nonlocal duration, received
        receiver.barrier(path)
        start = time.perf_counter()
        received = receiver.recv(msg_bytes, path)
        duration = time.perf_counter() - start

    received = b""
    t_send = threading.Thread(target=send_side, daemon=True)
    t_recv = threading.Thread(target=recv_side, daemon=True)
    t_send.start()
    t_recv.start()
    t_send.join()
    t_recv.join()
    sender.finalize()
    receiver.finalize()
    if received != payload:
        raise IoFailure("scaling exchange corrupted the payload")
    if msg_bytes == 0:
        return ScalingResult(0.0, degenerate=True)
    return ScalingResult(msg_bytes * 8.0 / duration)
