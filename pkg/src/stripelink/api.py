"""Path-level message passing: stripe, merge, exchange, cycle, synchronize.

The :class:`Mpw` instance owns a table of open channels addressed by dense
integer ids. Collective operations take a path (an ordered set of channel
ids), spawn one short-lived worker thread per involved channel, and join
them all before returning, so per-channel transfers always progress
concurrently. Known-size receives validate every incoming chunk length
against the locally computed stripe layout, which catches mismatched
message sizes between coupled peers early.

Example::

    import stripelink
    cfgs = [stripelink.ChannelConfig.connect("127.0.0.1", 6000),
            stripelink.ChannelConfig.connect("127.0.0.1", 6001)]
    mpw = stripelink.init(cfgs)
    mpw.send(payload, path=[0, 1])
    reply = mpw.recv(1024, path=[0, 1])
    mpw.finalize()

Failure policy: no silent retries. A single failing channel re-raises its
error (carrying the channel id); multiple concurrent failures raise
:class:`PathError` listing every one.
"""

from __future__ import annotations

import enum
import logging
import threading
from typing import Callable, Sequence

from . import transport
from .core import ChannelConfig, FrameKind, Path, stripe_layout
from .errors import (
    ArityMismatch,
    ChannelClosed,
    InitFailed,
    InstanceFinalized,
    InvalidConfig,
    IoFailure,
    OpenAborted,
    OverlappingPaths,
    PathError,
    SizeLimitExceeded,
    StripeMismatch,
)
from .transport import Channel

log = logging.getLogger(__name__)

DEFAULT_MAX_RECV = 1 << 30


class _Worker(threading.Thread):
    def __init__(self, cid: int, fn: Callable):
        super().__init__(daemon=True, name=f"stripelink-ch{cid}")
        self.cid = cid
        self.fn = fn
        self.result = None
        self.error: Exception | None = None

    def run(self):
        try:
            self.result = self.fn()
        except Exception as exc:
            self.error = exc


def _launch(jobs: Sequence[tuple[int, Callable]]) -> list[_Worker]:
    workers = [_Worker(cid, fn) for cid, fn in jobs]
    for w in workers:
        w.start()
    return workers


def _collect(workers: Sequence[_Worker]) -> dict[int, object]:
    for w in workers:
        w.join()
    failures = {w.cid: w.error for w in workers if w.error is not None}
    if failures:
        if len(failures) == 1:
            raise next(iter(failures.values()))
        raise PathError(failures)
    return {w.cid: w.result for w in workers}


def _collect_quietly(workers: Sequence[_Worker]) -> None:
    for w in workers:
        w.join()
        if w.error is not None:
            log.debug("channel %d worker failed during cleanup: %s", w.cid, w.error)


def _expect_data_header(channel: Channel) -> int:
    """Read one header that must announce a data frame; returns its length."""
    kind, payload_len = transport.recv_frame_header(channel)
    if kind is FrameKind.CLOSE:
        raise ChannelClosed(f"channel {channel.id}: peer closed", channel=channel.id)
    if kind is not FrameKind.DATA:
        raise IoFailure(
            f"channel {channel.id}: expected data frame, got {kind.name.lower()}",
            channel=channel.id,
        )
    return payload_len


class _State(enum.Enum):
    READY = "ready"
    FINALIZED = "finalized"


class Mpw:
    """A set of open channels plus the collective operations over them."""

    def __init__(self, channels: dict[int, Channel], default_max_recv: int = DEFAULT_MAX_RECV):
        self._channels = dict(channels)
        self._default_max_recv = default_max_recv
        self._state = _State.READY
        self._scratch_lock = threading.Lock()
        self._scratch: bytearray | None = bytearray()

    # -- lifecycle -------------------------------------------------------

    def finalize(self) -> None:
        """Close every channel. Idempotent; later operations fail."""
        if self._state is _State.FINALIZED:
            return
        self._state = _State.FINALIZED
        for channel in self._channels.values():
            transport.close_channel(channel)

    def __enter__(self) -> "Mpw":
        return self

    def __exit__(self, *exc) -> None:
        self.finalize()

    def _require_ready(self) -> None:
        if self._state is not _State.READY:
            raise InstanceFinalized("library instance has been finalized")

    # -- channel access --------------------------------------------------

    def channel(self, channel_id: int) -> Channel:
        try:
            return self._channels[channel_id]
        except KeyError:
            raise InvalidConfig(f"unknown channel id {channel_id}") from None

    def channel_ids(self) -> list[int]:
        return sorted(self._channels)

    def _resolve(self, path) -> tuple[Path, list[Channel]]:
        self._require_ready()
        p = Path.of(path)
        channels = [self.channel(cid) for cid in p]
        for ch in channels:
            ch._require_open()
        return p, channels

    def reopen_channel(self, channel_id: int, new_config: ChannelConfig) -> None:
        """Close one channel and open it again, possibly elsewhere.

        Both peers must perform the matching reopen; path operations issued
        afterwards use the new link.
        """
        self._require_ready()
        old = self.channel(channel_id)
        transport.close_channel(old)
        self._channels[channel_id] = transport.open_channel(new_config, channel_id)

    # -- collectives -----------------------------------------------------

    def barrier(self, path) -> None:
        """Synchronize with the peer over the first channel of the path.

        Returns only after our barrier frame was sent and the peer's
        barrier frame arrived.
        """
        _, channels = self._resolve(path)
        ch = channels[0]
        transport.send_frame(ch, FrameKind.BARRIER)
        kind, payload_len = transport.recv_frame_header(ch)
        if kind is FrameKind.CLOSE:
            raise ChannelClosed(f"channel {ch.id}: peer closed during barrier", channel=ch.id)
        if kind is not FrameKind.BARRIER:
            transport.drain_payload(ch, payload_len)
            raise IoFailure(
                f"channel {ch.id}: expected barrier frame, got {kind.name.lower()}",
                channel=ch.id,
            )

    def send(self, buf, path) -> None:
        """Stripe ``buf`` across the path, one data frame per channel."""
        p, channels = self._resolve(path)
        view = memoryview(buf)
        layout = stripe_layout(len(view), len(p))
        jobs = []
        for ch, (offset, length) in zip(channels, layout.chunks):
            jobs.append((ch.id, lambda ch=ch, chunk=view[offset:offset + length]:
                         transport.send_frame(ch, FrameKind.DATA, chunk)))
        _collect(_launch(jobs))

    def recv(self, expected_len: int, path) -> bytearray:
        """Receive one striped message of a known total length.

        Returns the assembled buffer as a ``bytearray`` (no defensive
        copy); all receive operations do the same.
        """
        p, channels = self._resolve(path)
        layout = stripe_layout(expected_len, len(p))
        out = bytearray(expected_len)
        view = memoryview(out)

        def receiver(ch: Channel, offset: int, length: int):
            actual = _expect_data_header(ch)
            if actual != length:
                transport.drain_payload(ch, actual)
                raise StripeMismatch(channel=ch.id, expected=length, actual=actual)
            transport.recv_payload_into(ch, view[offset:offset + length])

        jobs = [
            (ch.id, lambda ch=ch, off=off, ln=ln: receiver(ch, off, ln))
            for ch, (off, ln) in zip(channels, layout.chunks)
        ]
        _collect(_launch(jobs))
        return out

    def send_recv(self, send_buf, recv_len: int, path) -> bytearray:
        """Full-duplex striped exchange; deadlock-free for any sizes."""
        p, channels = self._resolve(path)
        send_view = memoryview(send_buf)
        send_layout = stripe_layout(len(send_view), len(p))
        recv_layout = stripe_layout(recv_len, len(p))
        out = bytearray(recv_len)
        out_view = memoryview(out)

        def receiver(ch: Channel, offset: int, length: int):
            actual = _expect_data_header(ch)
            if actual != length:
                transport.drain_payload(ch, actual)
                raise StripeMismatch(channel=ch.id, expected=length, actual=actual)
            transport.recv_payload_into(ch, out_view[offset:offset + length])

        jobs = []
        for ch, (offset, length) in zip(channels, send_layout.chunks):
            jobs.append((ch.id, lambda ch=ch, chunk=send_view[offset:offset + length]:
                         transport.send_frame(ch, FrameKind.DATA, chunk)))
        for ch, (offset, length) in zip(channels, recv_layout.chunks):
            jobs.append((ch.id, lambda ch=ch, off=offset, ln=length: receiver(ch, off, ln)))
        _collect(_launch(jobs))
        return out

    def cycle(self, send_buf, send_path, recv_len: int, recv_path) -> bytearray:
        """Striped send on one path concurrent with a striped receive on another."""
        sp = Path.of(send_path)
        rp = Path.of(recv_path)
        overlap = set(sp.channels) & set(rp.channels)
        if overlap:
            raise OverlappingPaths(f"send and receive paths share channels {sorted(overlap)}")
        _, send_channels = self._resolve(sp)
        _, recv_channels = self._resolve(rp)
        send_view = memoryview(send_buf)
        send_layout = stripe_layout(len(send_view), len(sp))
        recv_layout = stripe_layout(recv_len, len(rp))
        out = bytearray(recv_len)
        out_view = memoryview(out)

        def receiver(ch: Channel, offset: int, length: int):
            actual = _expect_data_header(ch)
            if actual != length:
                transport.drain_payload(ch, actual)
                raise StripeMismatch(channel=ch.id, expected=length, actual=actual)
            transport.recv_payload_into(ch, out_view[offset:offset + length])

        jobs = []
        for ch, (offset, length) in zip(send_channels, send_layout.chunks):
            jobs.append((ch.id, lambda ch=ch, chunk=send_view[offset:offset + length]:
                         transport.send_frame(ch, FrameKind.DATA, chunk)))
        for ch, (offset, length) in zip(recv_channels, recv_layout.chunks):
            jobs.append((ch.id, lambda ch=ch, off=offset, ln=length: receiver(ch, off, ln)))
        _collect(_launch(jobs))
        return out

    # -- unknown-size exchange -------------------------------------------

    def _take_scratch(self, total: int) -> tuple[bytearray, bool]:
        with self._scratch_lock:
            scratch = self._scratch
            if scratch is not None:
                self._scratch = None
                if len(scratch) < total:
                    scratch = bytearray(total)
                return scratch, True
        # scratch busy (concurrent call on disjoint paths): one-off buffer
        return bytearray(total), False

    def _return_scratch(self, scratch: bytearray, owned: bool) -> None:
        if owned:
            with self._scratch_lock:
                self._scratch = scratch

    def dsend_recv(self, send_buf, max_recv: int | None, path) -> bytes:
        """Exchange buffers whose incoming size the receiver does not know.

        The sender stripes by its actual length; each chunk's length rides
        in its frame header, so no separate size-exchange round trip
        happens. Chunks are concatenated in channel order (identical to the
        stripe layout when sizes agree). The total incoming length is
        checked against ``max_recv`` before any payload byte is stored, and
        the message is drained on violation so the path stays usable.

        Incoming payload storage is a retained scratch buffer reused across
        calls (capped by ``max_recv``), trading memory for the avoided
        per-call allocation.
        """
        p, channels = self._resolve(path)
        limit = self._default_max_recv if max_recv is None else max_recv
        if limit < 0:
            raise InvalidConfig("max_recv is non-negative")
        send_view = memoryview(send_buf)
        send_layout = stripe_layout(len(send_view), len(p))

        send_jobs = []
        for ch, (offset, length) in zip(channels, send_layout.chunks):
            send_jobs.append((ch.id, lambda ch=ch, chunk=send_view[offset:offset + length]:
                              transport.send_frame(ch, FrameKind.DATA, chunk)))
        send_workers = _launch(send_jobs)

        header_jobs = [(ch.id, lambda ch=ch: _expect_data_header(ch)) for ch in channels]
        try:
            lengths_by_id = _collect(_launch(header_jobs))
        except Exception:
            _collect_quietly(send_workers)
            raise
        lengths = [lengths_by_id[ch.id] for ch in channels]
        total = sum(lengths)

        if total > limit:
            drain_jobs = [
                (ch.id, lambda ch=ch, ln=ln: transport.drain_payload(ch, ln))
                for ch, ln in zip(channels, lengths)
            ]
            _collect_quietly(_launch(drain_jobs))
            _collect_quietly(send_workers)
            raise SizeLimitExceeded(actual=total, limit=limit)

        scratch, owned = self._take_scratch(total)
        try:
            view = memoryview(scratch)
            offsets = []
            pos = 0
            for ln in lengths:
                offsets.append(pos)
                pos += ln
            payload_jobs = [
                (ch.id, lambda ch=ch, off=off, ln=ln: transport.recv_payload_into(ch, view[off:off + ln]))
                for ch, off, ln in zip(channels, offsets, lengths)
            ]
            try:
                _collect(_launch(payload_jobs))
                _collect(send_workers)
            except Exception:
                _collect_quietly(send_workers)
                raise
            result = bytes(view[:total])
        finally:
            view = None
            self._return_scratch(scratch, owned)
        return result

    # -- per-channel (scatter/gather) variants ----------------------------

    def p_send(self, bufs: Sequence, path) -> None:
        """Scatter: buffer i travels whole on channel path[i]."""
        p, channels = self._resolve(path)
        if len(bufs) != len(p):
            raise ArityMismatch(f"{len(bufs)} buffers for {len(p)} channels")
        jobs = [
            (ch.id, lambda ch=ch, b=memoryview(b): transport.send_frame(ch, FrameKind.DATA, b))
            for ch, b in zip(channels, bufs)
        ]
        _collect(_launch(jobs))

    def p_recv(self, expected_lens: Sequence[int], path) -> list[bytearray]:
        """Gather: one whole buffer per channel, sizes known per slot."""
        p, channels = self._resolve(path)
        if len(expected_lens) != len(p):
            raise ArityMismatch(f"{len(expected_lens)} lengths for {len(p)} channels")
        slots: dict[int, bytearray] = {}

        def receiver(ch: Channel, length: int):
            actual = _expect_data_header(ch)
            if actual != length:
                transport.drain_payload(ch, actual)
                raise StripeMismatch(channel=ch.id, expected=length, actual=actual)
            buf = bytearray(length)
            transport.recv_payload_into(ch, memoryview(buf))
            slots[ch.id] = buf

        jobs = [
            (ch.id, lambda ch=ch, ln=int(ln): receiver(ch, ln))
            for ch, ln in zip(channels, expected_lens)
        ]
        _collect(_launch(jobs))
        return [slots[ch.id] for ch in channels]

    def p_send_recv(self, send_bufs: Sequence, expected_lens: Sequence[int], path) -> list[bytearray]:
        """Per-channel full-duplex exchange of explicit buffers."""
        p, channels = self._resolve(path)
        if len(send_bufs) != len(p):
            raise ArityMismatch(f"{len(send_bufs)} send buffers for {len(p)} channels")
        if len(expected_lens) != len(p):
            raise ArityMismatch(f"{len(expected_lens)} receive lengths for {len(p)} channels")
        slots: dict[int, bytearray] = {}

        def receiver(ch: Channel, length: int):
            actual = _expect_data_header(ch)
            if actual != length:
                transport.drain_payload(ch, actual)
                raise StripeMismatch(channel=ch.id, expected=length, actual=actual)
            buf = bytearray(length)
            transport.recv_payload_into(ch, memoryview(buf))
            slots[ch.id] = buf

        jobs = []
        for ch, b in zip(channels, send_bufs):
            jobs.append((ch.id, lambda ch=ch, b=memoryview(b): transport.send_frame(ch, FrameKind.DATA, b)))
        for ch, ln in zip(channels, expected_lens):
            jobs.append((ch.id, lambda ch=ch, ln=int(ln): receiver(ch, ln)))
        _collect(_launch(jobs))
        return [slots[ch.id] for ch in channels]


def init(
    configs: Sequence[ChannelConfig],
    *,
    links: Sequence | None = None,
    default_max_recv: int = DEFAULT_MAX_RECV,
) -> Mpw:
    """Open every configured channel concurrently and return the instance.

    Returns only when every channel is open. On the first failure all
    pending opens are aborted, already-open channels are closed, and
    :class:`InitFailed` identifies the failing channel index.

    ``links`` optionally injects one pre-connected link per config (used by
    the testkit); the handshake still runs over injected links.
    """
    configs = list(configs)
    if not configs:
        raise InvalidConfig("at least one channel config is required")
    if links is not None and len(links) != len(configs):
        raise InvalidConfig("links list must match configs list")
    cancel = transport.CancelToken()
    opened: dict[int, Channel] = {}
    opened_lock = threading.Lock()
    first_failure: list[tuple[int, Exception]] = []

    def opener(index: int, config: ChannelConfig):
        try:
            channel = transport.open_channel(
                config, index,
                link=None if links is None else links[index],
                cancel=cancel,
            )
        except OpenAborted:
            return
        except Exception as exc:
            with opened_lock:
                if not first_failure:
                    first_failure.append((index, exc))
            cancel.cancel()
            return
        with opened_lock:
            opened[index] = channel

    threads = [threading.Thread(target=opener, args=(i, cfg), daemon=True) for i, cfg in enumerate(configs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if first_failure:
        index, cause = first_failure[0]
        for channel in opened.values():
            transport.close_channel(channel)
        raise InitFailed(index, cause) from cause
    return Mpw(opened, default_max_recv=default_max_recv)
