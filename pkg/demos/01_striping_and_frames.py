"""
Striping and the wire format
============================

How one logical message is split across a set of channels, and what a
frame looks like on the wire. Everything here is pure computation; no
sockets are involved.
"""

from stripelink import FrameKind, decode_frame, encode_frame, stripe_layout

# A 100-byte message over one channel travels whole.
print(stripe_layout(100, 1).chunks)   # ((0, 100),)

# Over two channels it splits 50/50; over three, the remainder bytes go to
# the lowest-indexed channels so both peers derive the same layout without
# talking to each other.
print(stripe_layout(100, 2).chunks)   # ((0, 50), (50, 50))
print(stripe_layout(5, 3).chunks)     # ((0, 2), (2, 2), (4, 1))

# Messages shorter than the path is wide produce zero-length chunks; the
# empty frames still flow so both sides stay in step.
print(stripe_layout(2, 4).chunks)     # ((0, 1), (1, 1), (2, 0), (2, 0))

# Every transfer unit is a frame: a 10-byte header (version, kind, 8-byte
# big-endian length) followed by the payload.
wire = encode_frame(FrameKind.DATA, b"hello")
print(wire.hex(" "))                  # 01 00 00 00 00 00 00 00 00 05 ...

frame = decode_frame(wire)
print(frame.kind.name, frame.payload)  # DATA b'hello'

# Barrier frames carry no payload; they are the synchronization primitive.
print(encode_frame(FrameKind.BARRIER).hex(" "))
