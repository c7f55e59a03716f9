"""
Running the throughput sweep programmatically
=============================================

The benchmark walks a grid of (stream count, message size) cells; each
cell times a run of two-way exchanges and records the mean throughput
with its standard error. Here both sides run in one process over loopback
sockets, with a small grid so it finishes in seconds. The CLI form of the
same thing:

    stripelink-bench --role responder --base-port 28400 &
    stripelink-bench --role initiator --peer 127.0.0.1 --base-port 28400 \
        --streams 1,2,4,8 --sizes 1M,8M --iterations 100 --out sweep.csv

Throughput counts both directions of each exchange (2 x size x 8 bits /
duration); halve the numbers for one-directional figures.
"""

import tempfile
import threading

from stripelink import BenchPlan, emit_csv, run_benchmark

GRID = dict(
    stream_counts=(1, 2, 4),
    msg_sizes_bytes=(256 * 1024, 1 * 2**20),
    iterations=20,
    warmup_iterations=3,
    base_port=28400,
)

records = {}

def initiator():
    plan = BenchPlan(role="initiator", peer_host="127.0.0.1", **GRID)
    records["i"] = run_benchmark(plan)

def responder():
    records["r"] = run_benchmark(BenchPlan(role="responder", **GRID))

ti, tr = threading.Thread(target=initiator), threading.Thread(target=responder)
tr.start(); ti.start()
ti.join(); tr.join()

for rec in records["i"]:
    print(f"streams={rec.streams:<3d} size={rec.msg_size_bytes:>8d}  "
          f"mean={rec.mean_gbps:6.2f} Gbps  stderr={rec.stderr_gbps:.3f}")

with tempfile.NamedTemporaryFile(suffix=".csv", delete=False) as fh:
    emit_csv(records["i"], fh.name)
    print("CSV written to", fh.name)
