"""Shared fixtures: port allocation and connected instance pairs."""

from __future__ import annotations

import itertools
import random
import socket
import threading

import pytest

from stripelink import ChannelConfig, Mpw, init
from stripelink import testkit

# Sequential port allocation with an availability probe; starts at a
# randomized base so repeated runs do not trip over TIME_WAIT remnants.
_port_counter = itertools.count(random.randint(21000, 39000))
_port_lock = threading.Lock()


def _port_free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind(("", port))
            return True
        except OSError:
            return False


def free_ports(n: int) -> list[int]:
    ports: list[int] = []
    with _port_lock:
        while len(ports) < n:
            candidate = next(_port_counter)
            if candidate > 64000:
                raise RuntimeError("port space exhausted")
            if _port_free(candidate):
                ports.append(candidate)
    return ports


def free_port_range(span: int) -> int:
    """First port of a contiguous span of currently free ports."""
    with _port_lock:
        while True:
            base = next(_port_counter)
            if base + span > 64000:
                raise RuntimeError("port space exhausted")
            if all(_port_free(p) for p in range(base, base + span)):
                # advance past the block so later allocations skip it
                for _ in range(span):
                    next(_port_counter)
                return base


@pytest.fixture
def port_block():
    return free_ports


def loopback_pair(
    n_channels: int,
    *,
    connect_timeout_ms: int = 10_000,
    **config_kwargs,
) -> tuple[Mpw, Mpw, list[int]]:
    """Two instances joined by n loopback TCP channels."""
    ports = free_ports(n_channels)
    result: dict[str, Mpw] = {}
    errors: dict[str, Exception] = {}

    def open_side(name: str, configs):
        try:
            result[name] = init(configs)
        except Exception as exc:
            errors[name] = exc

    accept_cfgs = [
        ChannelConfig.accept(p, connect_timeout_ms=connect_timeout_ms, **config_kwargs)
        for p in ports
    ]
    connect_cfgs = [
        ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=connect_timeout_ms, **config_kwargs)
        for p in ports
    ]
    threads = [
        threading.Thread(target=open_side, args=("a", accept_cfgs), daemon=True),
        threading.Thread(target=open_side, args=("b", connect_cfgs), daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    if errors:
        raise next(iter(errors.values()))
    return result["a"], result["b"], ports


def run_pair(fn_a, fn_b, timeout: float = 60.0):
    """Drive two sides of an exchange in parallel; re-raise their errors."""
    out: dict[str, object] = {}
    errors: dict[str, Exception] = {}

    def runner(name, fn):
        try:
            out[name] = fn()
        except Exception as exc:
            errors[name] = exc

    ta = threading.Thread(target=runner, args=("a", fn_a), daemon=True)
    tb = threading.Thread(target=runner, args=("b", fn_b), daemon=True)
    ta.start()
    tb.start()
    ta.join(timeout)
    tb.join(timeout)
    if ta.is_alive() or tb.is_alive():
        raise TimeoutError("paired exchange did not finish in time")
    if errors:
        raise next(iter(errors.values()))
    return out.get("a"), out.get("b")


@pytest.fixture(params=["socket", "memory"])
def pair_factory(request):
    """Builds connected (side_a, side_b) instance pairs over either backend.

    Used to show the whole api surface behaves identically over real
    loopback sockets and over testkit links.
    """
    opened: list[Mpw] = []

    def build(n_channels: int) -> tuple[Mpw, Mpw]:
        if request.param == "socket":
            a, b, _ = loopback_pair(n_channels)
        else:
            a, b = testkit.mpw_pair(testkit.ImpairmentProfile(), n_channels=n_channels)
        opened.extend([a, b])
        return a, b

    yield build
    for mpw in opened:
        mpw.finalize()
