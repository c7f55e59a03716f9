"""Throughput benchmark harness: stream-count and message-size sweeps.

Two processes (an initiator and a responder) walk the same grid of
(stream count, message size) cells in lockstep. For each cell they open a
path of that many channels, run a few untimed warmup exchanges, then time
a fixed number of full-duplex exchanges and record the mean throughput
and its standard error.

Throughput accounting: one exchange moves the message once in each
direction, and both directions count, so a sample is
``2 * msg_bytes * 8 / duration`` bits per second (reported in Gbps,
1 Gbps = 1e9 bits/s). Halve the numbers for one-directional figures.

Plan compatibility is verified up front by exchanging a digest of the
sweep parameters over a dedicated control channel (port ``base_port``);
cell paths use ports ``base_port + 1 ...``. A cell that fails mid-run is
marked failed in the output and the sweep continues with the next cell.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import struct
import sys
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from . import api
from .core import BenchRecord, ChannelConfig, Path
from .errors import InvalidConfig, IoFailure, PlanMismatch, StripelinkError

log = logging.getLogger(__name__)

DEFAULT_STREAM_COUNTS = (1, 2, 4, 8, 16, 32, 64, 124)
DESK_SCALE_SIZES = (1 * 2**20, 8 * 2**20, 64 * 2**20)
PAPER_SCALE_SIZES = (8 * 2**20, 64 * 2**20, 512 * 2**20)
MAX_STREAMS = 128

CSV_HEADER = "streams,msg_bytes,iterations,mean_gbps,stderr_gbps,status"

_CELL_SYNC = struct.Struct(">QB")

Connector = Callable[[int, int], api.Mpw]
"""(n_channels, port_offset) -> open library instance for one side."""


@dataclass(frozen=True)
class BenchPlan:
    """One side's view of a benchmark run.

    ``stream_counts`` and ``msg_sizes_bytes`` define the sweep grid; both
    sides must agree on the grid, the iteration counts, and the warmup
    count (verified via a digest handshake). Valid plans need
    ``iterations >= 2`` so a standard error exists; a smaller value
    surfaces as an error at the statistics stage.
    """

    role: str
    peer_host: str | None = None
    base_port: int = 25000
    stream_counts: tuple[int, ...] = DEFAULT_STREAM_COUNTS
    msg_sizes_bytes: tuple[int, ...] = DESK_SCALE_SIZES
    iterations: int = 100
    warmup_iterations: int = 5
    out_path: str | None = None
    connect_timeout_ms: int = 30_000

    def __post_init__(self):
        if self.role not in ("initiator", "responder"):
            raise InvalidConfig(f"role must be initiator or responder, got {self.role!r}")
        if self.role == "initiator" and not self.peer_host:
            raise InvalidConfig("initiator plans require peer_host")
        if not self.stream_counts:
            raise InvalidConfig("stream_counts must be non-empty")
        for s in self.stream_counts:
            if not 1 <= s <= MAX_STREAMS:
                raise InvalidConfig(f"stream count {s} outside 1-{MAX_STREAMS}")
        if not self.msg_sizes_bytes or any(s <= 0 for s in self.msg_sizes_bytes):
            raise InvalidConfig("message sizes must be positive")
        if self.iterations < 1:
            raise InvalidConfig("iterations must be at least 1")
        if self.warmup_iterations < 0:
            raise InvalidConfig("warmup_iterations is non-negative")

    def digest(self) -> bytes:
        canon = "streams={};sizes={};iterations={};warmup={}".format(
            ",".join(map(str, self.stream_counts)),
            ",".join(map(str, self.msg_sizes_bytes)),
            self.iterations,
            self.warmup_iterations,
        )
        return hashlib.sha256(canon.encode()).digest()


def _socket_connector(plan: BenchPlan) -> Connector:
    def open_path(n_channels: int, port_offset: int) -> api.Mpw:
        if plan.role == "initiator":
            configs = [
                ChannelConfig.connect(plan.peer_host, plan.base_port + port_offset + i,
                                      connect_timeout_ms=plan.connect_timeout_ms)
                for i in range(n_channels)
            ]
        else:
            configs = [
                ChannelConfig.accept(plan.base_port + port_offset + i,
                                     connect_timeout_ms=plan.connect_timeout_ms)
                for i in range(n_channels)
            ]
        return api.init(configs)

    return open_path


def _cells(plan: BenchPlan):
    """Cell grid in output order: size-major, stream-count-minor."""
    index = 0
    for size in plan.msg_sizes_bytes:
        for streams in plan.stream_counts:
            yield index, streams, size
            index += 1


def _control_sync(control: api.Mpw, path: Path, index: int, flag: int) -> tuple[int, int]:
    """Exchange (cell index, flag) with the peer; returns the peer's pair."""
    reply = control.send_recv(_CELL_SYNC.pack(index, flag), _CELL_SYNC.size, path)
    return _CELL_SYNC.unpack(reply)


def run_benchmark(plan: BenchPlan, connector: Connector | None = None) -> list[BenchRecord]:
    """Execute the sweep; returns one record per cell in output order.

    Both sides call this with mirrored plans. Any transfer error inside a
    cell marks that cell failed and the sweep continues; control-channel
    failures and plan mismatches abort the run.
    """
    connector = connector or _socket_connector(plan)
    control = connector(1, 0)
    control_path = Path.of([0])
    records: list[BenchRecord] = []
    try:
        mine = plan.digest()
        theirs = control.send_recv(mine, len(mine), control_path)
        if theirs != mine:
            raise PlanMismatch(
                "peer is running a different sweep "
                f"(digest {theirs.hex()[:12]} != {mine.hex()[:12]})"
            )
        for index, streams, size in _cells(plan):
            peer_index, _ = _control_sync(control, control_path, index, 1)
            if peer_index != index:
                raise PlanMismatch(f"peer is at cell {peer_index}, expected {index}")
            samples = _run_cell(plan, connector, streams, size)
            ok = samples is not None
            _, peer_ok = _control_sync(control, control_path, index, 1 if ok else 0)
            if ok and peer_ok:
                records.append(BenchRecord.from_samples(streams, size, samples))
            else:
                records.append(BenchRecord.failed(streams, size))
                log.warning("cell streams=%d size=%d marked failed", streams, size)
    finally:
        control.finalize()
    return records


def _run_cell(plan: BenchPlan, connector: Connector, streams: int, size: int) -> list[float] | None:
    """Time one cell; returns per-exchange samples or None on failure."""
    payload = b"\x5a" * size
    try:
        mpw = connector(streams, 1)
    except StripelinkError as exc:
        log.warning("cell streams=%d size=%d: open failed: %s", streams, size, exc)
        return None
    path = Path.of(range(streams))
    try:
        start = time.perf_counter()
        mpw.barrier(path)
        rtt_ms = (time.perf_counter() - start) * 1000.0
        log.info("cell streams=%d size=%d barrier_rtt_ms=%.3f", streams, size, rtt_ms)
        for _ in range(plan.warmup_iterations):
            mpw.send_recv(payload, size, path)
        samples = []
        for _ in range(plan.iterations):
            t0 = time.perf_counter()
            mpw.send_recv(payload, size, path)
            duration = time.perf_counter() - t0
            samples.append(2 * size * 8 / duration / 1e9)
        return samples
    except StripelinkError as exc:
        log.warning("cell streams=%d size=%d: transfer failed: %s", streams, size, exc)
        return None
    finally:
        mpw.finalize()


def emit_csv(records: Sequence[BenchRecord], path: str) -> None:
    """Write records as CSV, one row per cell.

    Row order is deterministic: size-major, stream-count-minor. Failed
    cells carry empty statistics fields and ``status=failed``. Floats use
    repr formatting, so decimal points are locale-independent.
    """
    if not records:
        raise InvalidConfig("no records to write")
    ordered = sorted(records, key=lambda r: (r.msg_size_bytes, r.streams))
    lines = [CSV_HEADER]
    for rec in ordered:
        if rec.status == "ok":
            lines.append(
                f"{rec.streams},{rec.msg_size_bytes},{rec.iterations},"
                f"{rec.mean_gbps!r},{rec.stderr_gbps!r},{rec.status}"
            )
        else:
            lines.append(f"{rec.streams},{rec.msg_size_bytes},{rec.iterations},,,{rec.status}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _parse_size(text: str) -> int:
    text = text.strip().upper()
    factor = 1
    for suffix, mult in (("K", 1024), ("M", 2**20), ("G", 2**30)):
        if text.endswith(suffix):
            factor = mult
            text = text[:-1]
            break
    try:
        return int(text) * factor
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from None


def _parse_size_list(text: str) -> tuple[int, ...]:
    return tuple(_parse_size(p) for p in text.split(",") if p.strip())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="stripelink-bench",
        description="Sweep stream counts and message sizes over two-way timed "
                    "exchanges. Throughput counts both directions "
                    "(2 x size x 8 / duration); halve for one-way figures.",
    )
    parser.add_argument("--role", required=True, choices=("initiator", "responder"))
    parser.add_argument("--peer", default=None, metavar="HOST",
                        help="responder's address (initiator only)")
    parser.add_argument("--base-port", type=int, default=25000, metavar="N")
    parser.add_argument("--streams", type=_parse_int_list,
                        default=DEFAULT_STREAM_COUNTS, metavar="LIST",
                        help="comma-separated stream counts (default 1,2,4,8,16,32,64,124)")
    parser.add_argument("--sizes", type=_parse_size_list,
                        default=DESK_SCALE_SIZES, metavar="LIST",
                        help="comma-separated message sizes; K/M/G suffixes are binary "
                             "(default 1M,8M,64M)")
    parser.add_argument("--iterations", type=int, default=100, metavar="N")
    parser.add_argument("--warmup", type=int, default=5, metavar="N")
    parser.add_argument("--paper-sizes", action="store_true",
                        help="use the 8M,64M,512M size sweep instead of --sizes")
    parser.add_argument("--out", default=None, metavar="FILE.csv")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    sizes = PAPER_SCALE_SIZES if args.paper_sizes else tuple(args.sizes)
    try:
        plan = BenchPlan(
            role=args.role,
            peer_host=args.peer,
            base_port=args.base_port,
            stream_counts=tuple(args.streams),
            msg_sizes_bytes=sizes,
            iterations=args.iterations,
            warmup_iterations=args.warmup,
            out_path=args.out,
        )
    except InvalidConfig as exc:
        print(f"bad plan: {exc}", file=sys.stderr)
        return 2

    try:
        records = run_benchmark(plan)
    except StripelinkError as exc:
        print(f"benchmark aborted: {exc}", file=sys.stderr)
        return 1

    for rec in records:
        if rec.status == "ok":
            print(f"streams={rec.streams} msg_bytes={rec.msg_size_bytes} "
                  f"mean={rec.mean_gbps:.6f} Gbps stderr={rec.stderr_gbps:.6f}")
        else:
            print(f"streams={rec.streams} msg_bytes={rec.msg_size_bytes} FAILED")
    if plan.out_path:
        emit_csv(records, plan.out_path)
        print(f"wrote {plan.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
