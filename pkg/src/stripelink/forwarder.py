"""User-space relay bridging two channel sets, plus the forwarder daemon.

A relay pumps frames between two paths whose endpoints cannot reach each
other directly. Equal-width pairs are forwarded frame by frame with no
reassembly; when the widths differ, each incoming logical message is
reassembled from its chunk headers and re-striped for the outgoing width.
Barrier frames pass through unchanged. One logical message is buffered per
direction at a time (store and forward).

The daemon form reads a flat key=value config file describing both sides,
opens all channels, runs the relay until either side closes or a SIGINT
arrives, and logs per-direction byte counters at a fixed interval::

    # one channel toward the private network, two toward the WAN
    side_a.ports = 6000
    side_b.host = 192.0.2.17
    side_b.ports = 7000, 7001

A side with a ``host`` key dials out (connect role); a side without one
listens on its ports (accept role). Optional per-side keys:
``send_buffer_bytes``, ``recv_buffer_bytes``, ``pace_bytes_per_sec``,
``connect_timeout_ms``, ``retry_backoff_ms``.

Exit codes: 0 clean shutdown, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import enum
import logging
import signal
import sys
import threading
from dataclasses import dataclass

from . import api, transport
from .core import ChannelConfig, FrameKind, Path, stripe_layout
from .errors import (
    ChannelClosed,
    ConfigError,
    InvalidConfig,
    IoFailure,
    OverlappingPaths,
    RelayFailure,
    StripelinkError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirectionStats:
    frames: int = 0
    payload_bytes: int = 0


class RelayState(enum.Enum):
    RUNNING = "running"
    STOPPED = "stopped"


class RelayPair:
    """A running (or finished) relay between two paths, with counters.

    ``stats()`` returns a snapshot mapping ``"a_to_b"`` / ``"b_to_a"`` to
    :class:`DirectionStats`; counters track forwarded payload bytes (frame
    headers excluded) and only ever grow while the relay runs.
    """

    def __init__(self, side_a: Path, side_b: Path):
        self.side_a = side_a
        self.side_b = side_b
        self.state = RelayState.RUNNING
        self._lock = threading.Lock()
        self._counts = {"a_to_b": [0, 0], "b_to_a": [0, 0]}

    def _count(self, direction: str, frames: int, payload_bytes: int) -> None:
        with self._lock:
            entry = self._counts[direction]
            entry[0] += frames
            entry[1] += payload_bytes

    def stats(self) -> dict[str, DirectionStats]:
        with self._lock:
            return {
                name: DirectionStats(frames=entry[0], payload_bytes=entry[1])
                for name, entry in self._counts.items()
            }


def _forward_wave(in_channels, out_channels, first_len: int, pair: RelayPair, direction: str) -> None:
    """Forward one logical data message (one frame per incoming channel)."""
    m, n = len(in_channels), len(out_channels)
    if m == n:
        def job(i: int):
            ch_in, ch_out = in_channels[i], out_channels[i]
            length = first_len if i == 0 else api._expect_data_header(ch_in)
            buf = bytearray(length)
            transport.recv_payload_into(ch_in, memoryview(buf))
            transport.send_frame(ch_out, FrameKind.DATA, buf)
            return length
        lengths = api._collect(api._launch([(in_channels[i].id, lambda i=i: job(i)) for i in range(m)]))
        pair._count(direction, frames=m, payload_bytes=sum(lengths.values()))
        return

    # widths differ: reassemble from headers, re-stripe for the out width
    header_jobs = [
        (ch.id, lambda ch=ch: api._expect_data_header(ch))
        for ch in in_channels[1:]
    ]
    lengths_by_id = api._collect(api._launch(header_jobs)) if header_jobs else {}
    lengths = [first_len] + [lengths_by_id[ch.id] for ch in in_channels[1:]]
    total = sum(lengths)
    message = bytearray(total)
    view = memoryview(message)
    offsets = []
    pos = 0
    for ln in lengths:
        offsets.append(pos)
        pos += ln
    read_jobs = [
        (ch.id, lambda ch=ch, off=off, ln=ln: transport.recv_payload_into(ch, view[off:off + ln]))
        for ch, off, ln in zip(in_channels, offsets, lengths)
    ]
    api._collect(api._launch(read_jobs))
    layout = stripe_layout(total, n)
    send_jobs = [
        (ch.id, lambda ch=ch, off=off, ln=ln: transport.send_frame(ch, FrameKind.DATA, view[off:off + ln]))
        for ch, (off, ln) in zip(out_channels, layout.chunks)
    ]
    api._collect(api._launch(send_jobs))
    pair._count(direction, frames=m, payload_bytes=total)


def relay(mpw: api.Mpw, side_a, side_b, *, on_start=None) -> RelayPair:
    """Pump frames between two disjoint paths until either side closes.

    Runs until one side's first channel delivers a close (or the peer
    disconnects cleanly), then closes the other side and returns the pair
    with its final counters. An abnormal transport failure raises
    :class:`RelayFailure` naming the failing direction. ``on_start``, if
    given, receives the live :class:`RelayPair` before pumping begins (for
    progress reporting).
    """
    pa = Path.of(side_a)
    pb = Path.of(side_b)
    overlap = set(pa.channels) & set(pb.channels)
    if overlap:
        raise OverlappingPaths(f"relay sides share channels {sorted(overlap)}")
    _, channels_a = mpw._resolve(pa)
    _, channels_b = mpw._resolve(pb)

    pair = RelayPair(pa, pb)
    if on_start is not None:
        on_start(pair)
    stop = threading.Event()
    failures: list[RelayFailure] = []

    def close_everything():
        for ch in channels_a + channels_b:
            transport.close_channel(ch)

    def pump(in_channels, out_channels, direction: str):
        try:
            while not stop.is_set():
                kind, payload_len = transport.recv_frame_header(in_channels[0])
                if kind is FrameKind.CLOSE:
                    return
                if kind is FrameKind.BARRIER:
                    transport.send_frame(out_channels[0], FrameKind.BARRIER)
                    pair._count(direction, frames=1, payload_bytes=0)
                    continue
                if kind is not FrameKind.DATA:
                    raise IoFailure(
                        f"unexpected {kind.name.lower()} frame on channel {in_channels[0].id}",
                        channel=in_channels[0].id,
                    )
                _forward_wave(in_channels, out_channels, payload_len, pair, direction)
        except ChannelClosed:
            return
        except StripelinkError as exc:
            if not stop.is_set():
                failures.append(RelayFailure(direction, exc, channel=getattr(exc, "channel", None)))
        finally:
            stop.set()
            close_everything()

    pumps = [
        threading.Thread(target=pump, args=(channels_a, channels_b, "a_to_b"), daemon=True),
        threading.Thread(target=pump, args=(channels_b, channels_a, "b_to_a"), daemon=True),
    ]
    for t in pumps:
        t.start()
    for t in pumps:
        t.join()
    pair.state = RelayState.STOPPED
    if failures:
        raise failures[0]
    return pair


# -- daemon ----------------------------------------------------------------

_SIDE_KEYS = {
    "host": str,
    "ports": None,  # parsed specially
    "send_buffer_bytes": int,
    "recv_buffer_bytes": int,
    "pace_bytes_per_sec": int,
    "connect_timeout_ms": int,
    "retry_backoff_ms": int,
}


def _parse_ports(raw: str, lineno: int) -> list[int]:
    parts = [p for chunk in raw.split(",") for p in chunk.split()]
    if not parts:
        raise ConfigError(f"line {lineno}: empty port list")
    ports = []
    for p in parts:
        try:
            ports.append(int(p))
        except ValueError:
            raise ConfigError(f"line {lineno}: bad port {p!r}") from None
    return ports


def load_config(path: str) -> tuple[list[ChannelConfig], list[ChannelConfig]]:
    """Parse a forwarder config file into per-side channel config lists."""
    sides: dict[str, dict] = {"side_a": {}, "side_b": {}}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected key = value, got {text!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        value = value.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        side, _, field = key.partition(".")
        if side not in sides:
            raise ConfigError(f"line {lineno}: unknown side {side!r} (expected side_a or side_b)")
        if field not in _SIDE_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if field == "ports":
            sides[side][field] = _parse_ports(value, lineno)
        elif field == "host":
            sides[side][field] = value
        else:
            try:
                sides[side][field] = int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} expects an integer, got {value!r}") from None

    def build(side: str) -> list[ChannelConfig]:
        spec = sides[side]
        if "ports" not in spec:
            raise ConfigError(f"missing required key {side}.ports")
        host = spec.get("host")
        extras = {k: v for k, v in spec.items() if k not in ("ports", "host")}
        # each remote process numbers its own channels from zero, so present
        # the position within the side rather than the daemon-local id
        try:
            if host:
                return [
                    ChannelConfig.connect(host, port, handshake_index=i, **extras)
                    for i, port in enumerate(spec["ports"])
                ]
            return [
                ChannelConfig.accept(port, handshake_index=i, **extras)
                for i, port in enumerate(spec["ports"])
            ]
        except InvalidConfig as exc:
            raise ConfigError(f"{side}: {exc}") from exc

    return build("side_a"), build("side_b")


def _log_stats(pair: RelayPair) -> None:
    snapshot = pair.stats()
    log.info(
        "relay a->b %d frames / %d bytes, b->a %d frames / %d bytes",
        snapshot["a_to_b"].frames, snapshot["a_to_b"].payload_bytes,
        snapshot["b_to_a"].frames, snapshot["b_to_a"].payload_bytes,
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="stripelink-forwarder",
        description="Relay frames between two channel sets in user space.",
    )
    parser.add_argument("--config", required=True, help="path to the key=value config file")
    parser.add_argument("--log-interval", type=float, default=10.0, metavar="SEC",
                        help="seconds between byte-counter log lines (default 10)")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        configs_a, configs_b = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    side_a = list(range(len(configs_a)))
    side_b = list(range(len(configs_a), len(configs_a) + len(configs_b)))

    interrupted = threading.Event()
    mpw_holder: list[api.Mpw] = []

    def on_sigint(signum, frame):
        interrupted.set()
        log.info("interrupt received, shutting down")
        if mpw_holder:
            mpw_holder[0].finalize()

    previous = signal.signal(signal.SIGINT, on_sigint)
    try:
        try:
            mpw = api.init(list(configs_a) + list(configs_b))
        except StripelinkError as exc:
            if interrupted.is_set():
                return 0
            print(f"failed to open channels: {exc}", file=sys.stderr)
            return 1
        mpw_holder.append(mpw)
        log.info("forwarding between %d channel(s) on side_a and %d on side_b",
                 len(side_a), len(side_b))

        pair_holder: list[RelayPair] = []
        stats_stop = threading.Event()

        def stats_loop():
            while not stats_stop.wait(args.log_interval):
                if pair_holder:
                    _log_stats(pair_holder[0])

        stats_thread = threading.Thread(target=stats_loop, daemon=True)
        stats_thread.start()
        rc = 0
        try:
            pair = relay(mpw, side_a, side_b, on_start=pair_holder.append)
            _log_stats(pair)
        except StripelinkError as exc:
            if not interrupted.is_set():
                log.error("%s", exc)
                rc = 1
        finally:
            stats_stop.set()
            stats_thread.join(timeout=2.0)
            mpw.finalize()
        return rc
    finally:
        signal.signal(signal.SIGINT, previous)


if __name__ == "__main__":
    sys.exit(main())
