"""
Bridging unroutable networks with a user-space relay
====================================================

Two endpoints that cannot reach each other connect to a relay node
instead. The relay pumps frames in both directions; here the two sides
even have different widths (2 channels vs 3), so each message is
reassembled and re-striped in flight. Payloads come out byte-identical.
"""

import os
import threading

from stripelink import ChannelConfig, init, relay

PORTS_A = [28301, 28302]          # endpoint A <-> relay
PORTS_B = [28303, 28304, 28305]   # relay <-> endpoint B


def relay_node():
    # five channels total: ids 0-1 face A, ids 2-4 face B. B numbers its
    # channels 0-2, so the B-facing configs present those indices.
    mpw = init(
        [ChannelConfig.accept(p) for p in PORTS_A]
        + [ChannelConfig.accept(p, handshake_index=i) for i, p in enumerate(PORTS_B)]
    )
    pair = relay(mpw, side_a=[0, 1], side_b=[2, 3, 4])
    stats = pair.stats()
    print("relay stopped;",
          f"a->b {stats['a_to_b'].payload_bytes} bytes in {stats['a_to_b'].frames} frames,",
          f"b->a {stats['b_to_a'].payload_bytes} bytes")
    mpw.finalize()


def endpoint_a(payload):
    mpw = init([ChannelConfig.connect("127.0.0.1", p) for p in PORTS_A])
    mpw.send(payload, [0, 1])                  # striped 2 ways
    back = mpw.recv(6, [0, 1])
    print("A got reply:", bytes(back))
    mpw.finalize()                             # closing an endpoint stops the relay


def endpoint_b(payload):
    mpw = init([ChannelConfig.connect("127.0.0.1", p) for p in PORTS_B])
    got = mpw.recv(len(payload), [0, 1, 2])    # re-striped 3 ways by the relay
    print("B payload intact:", bytes(got) == payload)
    mpw.send(b"thanks", [0, 1, 2])


payload = os.urandom(500_000)
threads = [
    threading.Thread(target=relay_node),
    threading.Thread(target=endpoint_a, args=(payload,)),
    threading.Thread(target=endpoint_b, args=(payload,)),
]
for t in threads:
    t.start()
for t in threads:
    t.join()
