"""
Coupling a local and a remote peer through a gateway node
=========================================================

The classic deployment pattern: a gateway process bridges a local
single-stream connection and a two-stream long-distance path. The gateway
receives a block from its local peer, exchanges it with the remote side
(both directions at once), and hands the remote data back to the local
peer. Three processes, 100-byte messages.
"""

import multiprocessing
import os

MSG_SIZE = 100
LAN_PORT = 28201
WAN_PORTS = [28202, 28203]


def local_peer(payload):
    from stripelink import ChannelConfig, init

    mpw = init([ChannelConfig.connect("127.0.0.1", LAN_PORT)])
    mpw.send(payload, [0])
    remote_data = mpw.recv(MSG_SIZE, [0])
    print("local peer received the remote block:", remote_data[:8].hex(), "...")
    mpw.finalize()


def gateway():
    from stripelink import ChannelConfig, init

    # channel 0 is the local link; 1 and 2 stripe the long-distance path.
    # the remote process numbers those two channels 0 and 1, hence the
    # handshake_index overrides.
    mpw = init(
        [ChannelConfig.accept(LAN_PORT)]
        + [ChannelConfig.connect("127.0.0.1", p, handshake_index=i)
           for i, p in enumerate(WAN_PORTS)]
    )
    block = mpw.recv(MSG_SIZE, [0])               # recv from the local peer
    remote = mpw.send_recv(block, MSG_SIZE, [1, 2])  # two-way remote exchange
    mpw.send(remote, [0])                         # forward to the local peer
    mpw.finalize()


def remote_peer(payload):
    from stripelink import ChannelConfig, init

    mpw = init([ChannelConfig.accept(p) for p in WAN_PORTS])
    got = mpw.send_recv(payload, MSG_SIZE, [0, 1])
    print("remote peer received the local block:", got[:8].hex(), "...")
    mpw.finalize()


if __name__ == "__main__":
    local_block = os.urandom(MSG_SIZE)
    remote_block = os.urandom(MSG_SIZE)
    procs = [
        multiprocessing.Process(target=gateway),
        multiprocessing.Process(target=local_peer, args=(local_block,)),
        multiprocessing.Process(target=remote_peer, args=(remote_block,)),
    ]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    print("pipeline done")
