"""
Emulating a bad network without leaving the process
===================================================

The testkit provides in-process links with configurable one-way latency,
a per-channel rate cap, scheduled stalls, and hard disconnects. The whole
message-passing stack runs over them unchanged, which makes wide-area
phenomena reproducible at a desk: multi-stream scaling, long-RTT
synchronization costs, and the way one stalled stream gates a whole
collective transfer.
"""

import threading
import time

from stripelink.testkit import ImpairmentProfile, capped_scaling_scenario, mpw_pair

# --- multi-stream scaling under a per-stream cap ---------------------------
# Each emulated channel is capped at 100 Mbit/s, so adding streams adds
# bandwidth until the host runs out of steam.
for streams in (1, 2, 4, 8):
    result = capped_scaling_scenario(streams, cap_bits_per_sec=100e6, msg_bytes=4 * 2**20)
    print(f"{streams} stream(s): {result.throughput_bits_per_sec / 1e6:7.1f} Mbit/s")

# --- long-RTT synchronization ----------------------------------------------
# 18.8 ms each way. The peer enters the barrier after consuming a message,
# so the measuring side pays the full round trip.
a, b = mpw_pair(ImpairmentProfile(one_way_latency_ms=18.8))
rtt = {}

def side_a():
    a.send(b"x", [0])
    t0 = time.perf_counter()
    a.barrier([0])
    rtt["ms"] = (time.perf_counter() - t0) * 1000

def side_b():
    b.recv(1, [0])
    b.barrier([0])

ta, tb = threading.Thread(target=side_a), threading.Thread(target=side_b)
ta.start(); tb.start(); ta.join(); tb.join()
print(f"barrier round trip over emulated link: {rtt['ms']:.1f} ms")
a.finalize(); b.finalize()

# --- one stalled stream gates the collective --------------------------------
# Four streams carry 8 MiB; one of them pauses for 2 s at byte offset 1e6.
# The transfer completes only when the slowest stream does.
profiles = [ImpairmentProfile(stall_schedule=[(1_000_000, 2000.0)])] + [
    ImpairmentProfile() for _ in range(3)
]
a, b = mpw_pair(profiles)
payload = b"\x5c" * (8 * 2**20)
timing = {}

def tx():
    a.barrier([0, 1, 2, 3])
    a.send(payload, [0, 1, 2, 3])

def rx():
    b.barrier([0, 1, 2, 3])
    t0 = time.perf_counter()
    b.recv(len(payload), [0, 1, 2, 3])
    timing["s"] = time.perf_counter() - t0

ta, tb = threading.Thread(target=tx), threading.Thread(target=rx)
ta.start(); tb.start(); ta.join(); tb.join()
print(f"4-stream transfer with one 2 s stall: {timing['s']:.2f} s "
      "(the other three streams finished long before)")
a.finalize(); b.finalize()
