"""
Striped transfers over loopback sockets
=======================================

Opens four parallel channels between two endpoints in one process (two
threads play the two sides) and walks through the main operations: striped
send/recv, the full-duplex exchange, unknown-size transfers, and the
per-channel scatter/gather variants.
"""

import os
import threading

from stripelink import ChannelConfig, init

PORTS = [28101, 28102, 28103, 28104]
PATH = [0, 1, 2, 3]


def side_a():
    # the accepting side listens on each port and takes one connection per channel
    mpw = init([ChannelConfig.accept(p) for p in PORTS])

    payload = os.urandom(1_000_000)
    mpw.send(payload, PATH)                      # striped into 4 x 250_000

    echoed = mpw.recv(len(payload), PATH)        # merged back from 4 chunks
    print("echo intact:", bytes(echoed) == payload)

    # full duplex: both directions move concurrently, any sizes
    reply = mpw.send_recv(b"ping" * 1000, 8, PATH)
    print("exchange reply:", bytes(reply))

    # the receiver of a dynamic transfer learns sizes from frame headers
    got = mpw.dsend_recv(b"", 1 << 20, PATH)
    print("dynamic size received:", len(got))

    # scatter unequal buffers, one per channel
    mpw.p_send([b"a", b"bb", b"ccc", b"dddd"], PATH)
    mpw.finalize()


def side_b():
    mpw = init([ChannelConfig.connect("127.0.0.1", p) for p in PORTS])

    payload = mpw.recv(1_000_000, PATH)
    mpw.send(payload, PATH)                      # bounce it back

    sent = mpw.send_recv(b"pong!ok!", 4000, PATH)
    print("exchange got", len(sent), "bytes")

    mpw.dsend_recv(os.urandom(12345), 1 << 20, PATH)

    slots = mpw.p_recv([1, 2, 3, 4], PATH)
    print("gathered slots:", [bytes(s) for s in slots])
    mpw.finalize()


ta = threading.Thread(target=side_a)
tb = threading.Thread(target=side_b)
ta.start(); tb.start()
ta.join(); tb.join()
