"""Relay pumps, width-changing re-striping, chaining, and the daemon CLI."""

from __future__ import annotations

import random
import signal
import subprocess
import sys
import threading
import time

import pytest

from stripelink import ChannelClosed, ChannelConfig, ConfigError, OverlappingPaths, init, relay
from stripelink.forwarder import load_config

from conftest import free_ports, loopback_pair, run_pair

rng = random.Random(0xF0F0)


class RelayHarness:
    """A (width_a)-channel endpoint and a (width_b)-channel endpoint joined
    by an in-process relay node."""

    def __init__(self, width_a: int, width_b: int):
        ports_a = free_ports(width_a)
        ports_b = free_ports(width_b)
        holders = {}

        def open_relay():
            holders["relay"] = init(
                [ChannelConfig.accept(p, connect_timeout_ms=10_000) for p in ports_a]
                + [ChannelConfig.accept(p, connect_timeout_ms=10_000, handshake_index=i)
                   for i, p in enumerate(ports_b)]
            )

        def open_a():
            holders["a"] = init(
                [ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=10_000) for p in ports_a]
            )

        def open_b():
            holders["b"] = init(
                [ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=10_000) for p in ports_b]
            )

        threads = [threading.Thread(target=f, daemon=True) for f in (open_relay, open_a, open_b)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(30)
        self.relay_mpw = holders["relay"]
        self.a = holders["a"]
        self.b = holders["b"]
        self.side_a = list(range(width_a))
        self.side_b = list(range(width_a, width_a + width_b))
        self.path_a = list(range(width_a))
        self.path_b = list(range(width_b))
        self.result = {}

        def run_relay():
            try:
                self.result["pair"] = relay(self.relay_mpw, self.side_a, self.side_b)
            except Exception as exc:
                self.result["error"] = exc

        self.relay_thread = threading.Thread(target=run_relay, daemon=True)
        self.relay_thread.start()

    def shutdown(self):
        self.a.finalize()
        self.relay_thread.join(10)
        self.b.finalize()
        self.relay_mpw.finalize()


class TestRelay:
    def test_one_channel_each_side_100_bytes(self):
        h = RelayHarness(1, 1)
        payload = rng.randbytes(100)
        try:
            _, got = run_pair(lambda: h.a.send(payload, h.path_a),
                              lambda: h.b.recv(100, h.path_b))
            assert got == payload
        finally:
            h.shutdown()
        assert "error" not in h.result
        stats = h.result["pair"].stats()
        assert stats["a_to_b"].payload_bytes == 100
        assert stats["a_to_b"].frames == 1

    def test_width_change_re_stripes_byte_identically(self):
        h = RelayHarness(2, 3)
        payload = rng.randbytes(1 << 20)
        try:
            _, got = run_pair(lambda: h.a.send(payload, h.path_a),
                              lambda: h.b.recv(len(payload), h.path_b))
            assert got == payload
            # and the reverse direction re-stripes 3 -> 2
            back = rng.randbytes(777_777)
            got_back, _ = run_pair(lambda: h.a.recv(len(back), h.path_a),
                                   lambda: h.b.send(back, h.path_b))
            assert got_back == back
        finally:
            h.shutdown()

    def test_randomized_payloads_both_directions(self):
        h = RelayHarness(2, 3)
        try:
            for _ in range(20):
                size = rng.randrange(0, 200_000)
                payload = rng.randbytes(size)
                _, got = run_pair(lambda p=payload: h.a.send(p, h.path_a),
                                  lambda s=size: h.b.recv(s, h.path_b))
                assert got == payload
        finally:
            h.shutdown()

    def test_barrier_passes_through(self):
        h = RelayHarness(2, 3)
        try:
            run_pair(lambda: h.a.barrier(h.path_a), lambda: h.b.barrier(h.path_b))
        finally:
            h.shutdown()

    def test_dsend_recv_through_relay(self):
        # unknown-size transfers survive re-striping (receiver reads headers)
        h = RelayHarness(2, 3)
        payload = rng.randbytes(54_321)
        try:
            _, got = run_pair(lambda: h.a.send(payload, h.path_a),
                              lambda: h.b.dsend_recv(b"", 10**6, h.path_b))
            assert got == payload
        finally:
            h.shutdown()

    def test_two_chained_relays(self):
        # A(2) -- R1 -- (3) -- R2 -- (2)B with per-hop stats
        ports_a = free_ports(2)
        ports_mid = free_ports(3)
        ports_b = free_ports(2)
        holders = {}

        def open_r1():
            holders["r1"] = init(
                [ChannelConfig.accept(p, connect_timeout_ms=10_000) for p in ports_a]
                + [ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=10_000, handshake_index=i)
                   for i, p in enumerate(ports_mid)]
            )

        def open_r2():
            holders["r2"] = init(
                [ChannelConfig.accept(p, connect_timeout_ms=10_000) for p in ports_mid]
                + [ChannelConfig.accept(p, connect_timeout_ms=10_000, handshake_index=i)
                   for i, p in enumerate(ports_b)]
            )

        def open_a():
            holders["a"] = init(
                [ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=10_000) for p in ports_a]
            )

        def open_b():
            holders["b"] = init(
                [ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=10_000) for p in ports_b]
            )

        threads = [threading.Thread(target=f, daemon=True) for f in (open_r2, open_r1, open_a, open_b)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(30)

        results = {}

        def run_r1():
            results["r1"] = relay(holders["r1"], [0, 1], [2, 3, 4])

        def run_r2():
            results["r2"] = relay(holders["r2"], [0, 1, 2], [3, 4])

        t1 = threading.Thread(target=run_r1, daemon=True)
        t2 = threading.Thread(target=run_r2, daemon=True)
        t1.start(); t2.start()

        payload = rng.randbytes(321_000)
        _, got = run_pair(lambda: holders["a"].send(payload, [0, 1]),
                          lambda: holders["b"].recv(len(payload), [0, 1]))
        assert got == payload

        holders["a"].finalize()
        t1.join(10); t2.join(10)
        holders["b"].finalize()
        for hop in ("r1", "r2"):
            stats = results[hop].stats()
            assert stats["a_to_b"].payload_bytes == len(payload)
        holders["r1"].finalize()
        holders["r2"].finalize()

    def test_three_chained_relays(self):
        # A(2) - R1 - (3) - R2 - (2) - R3 - (3)B : payload survives 3 hops
        widths = [2, 3, 2, 3]
        port_sets = [free_ports(w) for w in widths]
        holders: dict[str, object] = {}
        relay_threads = []

        def relay_node(name: str, ports_in, ports_out, dial_out: bool):
            if dial_out:
                out_cfgs = [ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=15_000,
                                                  handshake_index=i)
                            for i, p in enumerate(ports_out)]
            else:
                out_cfgs = [ChannelConfig.accept(p, connect_timeout_ms=15_000, handshake_index=i)
                            for i, p in enumerate(ports_out)]
            mpw = init([ChannelConfig.accept(p, connect_timeout_ms=15_000) for p in ports_in]
                       + out_cfgs)
            holders[name] = mpw
            relay(mpw, list(range(len(ports_in))),
                  list(range(len(ports_in), len(ports_in) + len(ports_out))))

        for i, dial in ((2, False), (1, True), (0, True)):  # innermost listener first
            t = threading.Thread(
                target=relay_node,
                args=(f"r{i}", port_sets[i], port_sets[i + 1], dial),
                daemon=True,
            )
            t.start()
            relay_threads.append(t)

        ends = {}

        def open_a():
            ends["a"] = init([ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=15_000)
                              for p in port_sets[0]])

        def open_b():
            ends["b"] = init([ChannelConfig.connect("127.0.0.1", p, connect_timeout_ms=15_000)
                              for p in port_sets[3]])

        run_pair(open_a, open_b, timeout=60)
        payload = rng.randbytes(123_456)
        _, got = run_pair(lambda: ends["a"].send(payload, [0, 1]),
                          lambda: ends["b"].recv(len(payload), [0, 1, 2]), timeout=60)
        assert got == payload
        ends["a"].finalize()
        for t in relay_threads:
            t.join(15)
        ends["b"].finalize()
        for name in ("r0", "r1", "r2"):
            holders[name].finalize()

    def test_liveness_one_sided_streaming(self):
        # a_to_b traffic keeps flowing with nothing moving b_to_a
        h = RelayHarness(1, 1)
        try:
            deadline = time.monotonic() + 20
            for _ in range(50):
                h_payload = rng.randbytes(10_000)
                _, got = run_pair(lambda p=h_payload: h.a.send(p, h.path_a),
                                  lambda: h.b.recv(10_000, h.path_b))
                assert got == h_payload
                assert time.monotonic() < deadline
        finally:
            h.shutdown()

    def test_overlapping_sides_rejected(self):
        a, b, _ = loopback_pair(2)
        try:
            with pytest.raises(OverlappingPaths):
                relay(a, [0, 1], [1])
        finally:
            a.finalize(); b.finalize()

    def test_endpoint_close_stops_relay_and_closes_other_side(self):
        h = RelayHarness(1, 1)
        h.a.finalize()
        h.relay_thread.join(10)
        assert not h.relay_thread.is_alive()
        # B's next receive observes the close promptly
        with pytest.raises(ChannelClosed):
            h.b.recv(10, h.path_b)
        h.b.finalize()
        h.relay_mpw.finalize()


class TestConfigFile:
    def test_minimal_config_parses(self, tmp_path):
        cfg = tmp_path / "fwd.cfg"
        cfg.write_text(
            "# bridge one private channel to two upstream ones\n"
            "side_a.ports = 6000\n"
            "side_b.host = 192.0.2.9\n"
            "side_b.ports = 7000, 7001\n"
            "side_b.pace_bytes_per_sec = 1048576\n"
        )
        side_a, side_b = load_config(str(cfg))
        assert len(side_a) == 1 and side_a[0].role.value == "accept"
        assert len(side_b) == 2 and side_b[0].peer_host == "192.0.2.9"
        assert side_b[1].pace_bytes_per_sec == 1048576
        assert side_b[1].handshake_index == 1

    def test_unknown_key_names_line_and_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("side_a.ports = 6000\nside_a.bogus = 1\n")
        with pytest.raises(ConfigError) as excinfo:
            load_config(str(cfg))
        assert "line 2" in str(excinfo.value)
        assert "bogus" in str(excinfo.value)

    def test_missing_ports_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("side_a.ports = 6000\n")
        with pytest.raises(ConfigError) as excinfo:
            load_config(str(cfg))
        assert "side_b.ports" in str(excinfo.value)

    def test_bad_integer_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("side_a.ports = 6000\nside_b.ports = x\n")
        with pytest.raises(ConfigError) as excinfo:
            load_config(str(cfg))
        assert "line 2" in str(excinfo.value)


class TestDaemonCli:
    def _spawn(self, config_path: str):
        return subprocess.Popen(
            [sys.executable, "-m", "stripelink.forwarder", "--config", config_path,
             "--log-interval", "1"],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )

    def test_end_to_end_echo_through_daemon(self, tmp_path):
        pa, pb = free_ports(2)
        cfg = tmp_path / "fwd.cfg"
        cfg.write_text(f"side_a.ports = {pa}\nside_b.ports = {pb}\n")
        proc = self._spawn(str(cfg))
        try:
            holders = {}

            def open_a():
                holders["a"] = init([ChannelConfig.connect("127.0.0.1", pa, connect_timeout_ms=15_000)])

            def open_b():
                holders["b"] = init([ChannelConfig.connect("127.0.0.1", pb, connect_timeout_ms=15_000)])

            run_pair(open_a, open_b, timeout=30)
            payload = rng.randbytes(4096)
            _, got = run_pair(lambda: holders["a"].send(payload, [0]),
                              lambda: holders["b"].recv(4096, [0]))
            assert got == payload
            holders["a"].finalize()
            holders["b"].finalize()
            rc = proc.wait(timeout=15)
            assert rc == 0, proc.stderr.read()
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()

    def test_malformed_config_exits_2_with_diagnostic(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("side_a.ports = 6000\nside_b.wrongkey = 2\n")
        proc = self._spawn(str(cfg))
        out, err = proc.communicate(timeout=15)
        assert proc.returncode == 2
        assert "wrongkey" in err

    @pytest.mark.slow
    def test_sigint_while_idle_exits_cleanly(self, tmp_path):
        pa, pb = free_ports(2)
        cfg = tmp_path / "fwd.cfg"
        cfg.write_text(f"side_a.ports = {pa}\nside_b.ports = {pb}\n")
        proc = self._spawn(str(cfg))
        try:
            holders = {}

            def open_a():
                holders["a"] = init([ChannelConfig.connect("127.0.0.1", pa, connect_timeout_ms=15_000)])

            def open_b():
                holders["b"] = init([ChannelConfig.connect("127.0.0.1", pb, connect_timeout_ms=15_000)])

            run_pair(open_a, open_b, timeout=30)
            time.sleep(0.3)  # relay idle
            proc.send_signal(signal.SIGINT)
            rc = proc.wait(timeout=15)
            assert rc == 0

            # both endpoints observe the shutdown as a close
            def expect_closed(mpw):
                with pytest.raises(ChannelClosed):
                    mpw.recv(10, [0])

            run_pair(lambda: expect_closed(holders["a"]),
                     lambda: expect_closed(holders["b"]), timeout=15)
            holders["a"].finalize()
            holders["b"].finalize()
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
