"""Anonymizing proxy: header scrubbing, NAT identity hiding, mix batching."""

from __future__ import annotations

import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from splitballot import anonymizer


def _start_upstream():
    """A capture server standing in for the ballot server."""
    captures: list[dict] = []

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _handle(self):
            length = int(self.headers.get("Content-Length") or 0)
            captures.append(
                {
                    "peer_port": self.client_address[1],
                    "path": self.path,
                    "headers": {k.lower(): v for k, v in self.headers.items()},
                    "body": self.rfile.read(length) if length else b"",
                    "at": time.monotonic(),
                }
            )
            payload = json.dumps({"ok": True, "path": self.path}).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        do_GET = _handle
        do_POST = _handle

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, captures


def _make_proxy(tmp_path: Path, upstream_port: int, **config):
    state = tmp_path / "anon"
    state.mkdir(exist_ok=True)
    body = {"mode": "nat", "upstream": f"127.0.0.1:{upstream_port}", "adversaries": []}
    body.update(config)
    (state / "config.json").write_text(json.dumps(body))
    proxy = anonymizer.Anonymizer(state)
    server = anonymizer.serve(proxy)
    return proxy, server, state


def _raw_request(path: str, headers: dict[str, str] | None = None, body: bytes = b"", method: str = "GET") -> bytes:
    lines = [f"{method} {path} HTTP/1.1", "Host: ballot.test"]
    for name, value in (headers or {}).items():
        lines.append(f"{name}: {value}")
    if body:
        lines.append(f"Content-Length: {len(body)}")
    return "\r\n".join(lines).encode("ascii") + b"\r\n\r\n" + body


def _roundtrip(port: int, request: bytes) -> tuple[bytes, int]:
    """Send one request, return (full response bytes, our source port)."""
    with socket.create_connection(("127.0.0.1", port), timeout=10) as sock:
        source_port = sock.getsockname()[1]
        sock.sendall(request)
        chunks = []
        while True:
            chunk = sock.recv(65536)
            if not chunk:
                break
            chunks.append(chunk)
    return b"".join(chunks), source_port


def test_nat_mode_strips_identity_and_hides_the_source(tmp_path):
    upstream, captures = _start_upstream()
    try:
        _, proxy_server, _ = _make_proxy(tmp_path, upstream.server_address[1])
        response, source_port = _roundtrip(
            proxy_server.port,
            _raw_request(
                "/vote/form",
                headers={
                    "User-Agent": "VoterBrowser/1.0",
                    "Cookie": "trackme=1",
                    "X-Forwarded-For": "10.0.0.7",
                    "Accept-Language": "it-IT",
                    "Authorization": "Bearer not-identifying",
                },
            ),
        )
        assert response.startswith(b"HTTP/1.1 200")
        assert b'"ok":true' in response.replace(b" ", b"")
        assert len(captures) == 1
        seen = captures[0]
        # the upstream connection comes from the proxy's own socket
        assert seen["peer_port"] != source_port
        for gone in ("user-agent", "cookie", "x-forwarded-for", "accept-language", "referer", "via"):
            assert gone not in seen["headers"]
        # non-fingerprinting headers survive the scrub
        assert seen["headers"].get("host") == "ballot.test"
        assert seen["headers"].get("authorization") == "Bearer not-identifying"
        assert seen["headers"].get("connection") == "close"
    finally:
        upstream.shutdown()


def test_post_bodies_pass_through_unchanged(tmp_path):
    upstream, captures = _start_upstream()
    try:
        _, proxy_server, _ = _make_proxy(tmp_path, upstream.server_address[1])
        body = json.dumps({"vote": {"answers": [["q1", 0]]}}).encode()
        response, _ = _roundtrip(proxy_server.port, _raw_request("/vote/cast", body=body, method="POST"))
        assert response.startswith(b"HTTP/1.1 200")
        assert captures[0]["body"] == body
        assert captures[0]["path"] == "/vote/cast"
    finally:
        upstream.shutdown()


def test_unreachable_upstream_yields_gateway_error(tmp_path):
    _, proxy_server, _ = _make_proxy(tmp_path, 9)  # discard port: nobody listens
    response, _ = _roundtrip(proxy_server.port, _raw_request("/vote/form"))
    assert response.startswith(b"HTTP/1.1 502")
    assert b"upstream-unreachable" in response


def test_mix_batch_flushes_when_full(tmp_path):
    upstream, captures = _start_upstream()
    try:
        _, proxy_server, _ = _make_proxy(
            tmp_path, upstream.server_address[1],
            mode="mix", batch_size=3, max_hold_seconds=30.0,
        )
        results = [None] * 3

        def go(i):
            results[i], _ = _roundtrip(proxy_server.port, _raw_request(f"/probe/{i}"))

        threads = [threading.Thread(target=go, args=(i,)) for i in range(3)]
        start = time.monotonic()
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=20)
        elapsed = time.monotonic() - start
        # the batch filled, so nobody waited out the 30s hold
        assert elapsed < 10
        assert all(r is not None and r.startswith(b"HTTP/1.1 200") for r in results)
        assert len(captures) == 3
    finally:
        upstream.shutdown()


def test_mix_lone_request_flushes_on_the_hold_timer(tmp_path):
    upstream, captures = _start_upstream()
    try:
        _, proxy_server, _ = _make_proxy(
            tmp_path, upstream.server_address[1],
            mode="mix", batch_size=5, max_hold_seconds=0.3,
        )
        start = time.monotonic()
        response, _ = _roundtrip(proxy_server.port, _raw_request("/probe/lonely"))
        elapsed = time.monotonic() - start
        assert response.startswith(b"HTTP/1.1 200")
        assert elapsed >= 0.25, "a lone request should be held for the full hold window"
        assert len(captures) == 1
    finally:
        upstream.shutdown()


def test_mix_forwarding_order_varies_across_batches(tmp_path):
    upstream, captures = _start_upstream()
    try:
        _, proxy_server, _ = _make_proxy(
            tmp_path, upstream.server_address[1],
            mode="mix", batch_size=4, max_hold_seconds=30.0,
        )
        orders = set()
        for batch in range(12):
            barrier = threading.Barrier(4)
            threads = []

            def go(i, batch=batch):
                barrier.wait()
                _roundtrip(proxy_server.port, _raw_request(f"/b{batch}/{i}"))

            before = len(captures)
            for i in range(4):
                t = threading.Thread(target=go, args=(i,))
                t.start()
                threads.append(t)
            for t in threads:
                t.join(timeout=20)
            batch_paths = tuple(c["path"].split("/")[-1] for c in captures[before:])
            assert len(batch_paths) == 4
            orders.add(batch_paths)
        # 12 uniform draws from 24 permutations collide onto one order
        # with probability (1/24)^11; seeing a single order means no shuffle.
        assert len(orders) >= 2
    finally:
        upstream.shutdown()


def test_forward_order_reaches_every_permutation():
    from itertools import permutations

    seen = {tuple(anonymizer.Mixer.forward_order([0, 1, 2, 3])) for _ in range(2000)}
    assert seen == set(permutations(range(4)))


def test_mix_mode_requires_a_real_batch(tmp_path):
    state = tmp_path / "anon"
    state.mkdir()
    (state / "config.json").write_text(
        json.dumps({"mode": "mix", "upstream": "127.0.0.1:9", "batch_size": 1, "adversaries": []})
    )
    with pytest.raises(ValueError):
        anonymizer.Anonymizer(state)


def test_scrub_log_policy_honest_proxy_keeps_nothing(tmp_path):
    upstream, _ = _start_upstream()
    try:
        _, proxy_server, state = _make_proxy(tmp_path, upstream.server_address[1])
        for i in range(3):
            _roundtrip(proxy_server.port, _raw_request(f"/vote/form?n={i}"))
        policy = anonymizer.scrub_log_policy(state)
        assert policy == {"mode": "nat", "persists_client_data": False, "record_count": 0}
        assert not (state / "cheat").exists()
    finally:
        upstream.shutdown()


def test_cheating_proxy_records_clients_only_when_armed(tmp_path, monkeypatch):
    monkeypatch.setenv("BALLOT_HARNESS_CHEAT", "1")
    upstream, _ = _start_upstream()
    try:
        _, proxy_server, state = _make_proxy(
            tmp_path, upstream.server_address[1], adversaries=["cheat-log"]
        )
        _, source_port = _roundtrip(proxy_server.port, _raw_request("/vote/cast", method="POST"))
        policy = anonymizer.scrub_log_policy(state)
        assert policy["persists_client_data"] is True
        assert policy["record_count"] == 1
        record = json.loads((state / "cheat" / "log.jsonl").read_text().strip())
        assert record["client_port"] == source_port
    finally:
        upstream.shutdown()


def test_cheat_flags_are_inert_without_the_environment_switch(tmp_path, monkeypatch):
    monkeypatch.delenv("BALLOT_HARNESS_CHEAT", raising=False)
    upstream, _ = _start_upstream()
    try:
        _, proxy_server, state = _make_proxy(
            tmp_path, upstream.server_address[1], adversaries=["cheat-log", "tamper"]
        )
        _roundtrip(proxy_server.port, _raw_request("/vote/form"))
        assert not (state / "cheat").exists()
        assert anonymizer.scrub_log_policy(state)["record_count"] == 0
    finally:
        upstream.shutdown()


def test_tamper_flips_exactly_one_cast_in_transit(tmp_path, monkeypatch):
    monkeypatch.setenv("BALLOT_HARNESS_CHEAT", "1")
    state = tmp_path / "anon"
    state.mkdir()
    (state / "config.json").write_text(
        json.dumps({"mode": "nat", "upstream": "127.0.0.1:9", "adversaries": ["tamper"]})
    )
    proxy = anonymizer.Anonymizer(state)

    def cast_message():
        body = json.dumps({"vote": {"answers": [["q1", 0], ["q2", 1]]}}).encode()
        headers = [(b"Host", b"ballot.test"), (b"Content-Length", str(len(body)).encode())]
        return b"POST /vote/cast HTTP/1.1", headers, body

    start, headers, body = proxy._maybe_tamper(*cast_message())
    tampered = json.loads(body)
    assert tampered["vote"]["answers"][0] == ["q1", 1], "first answer should be flipped"
    assert tampered["vote"]["answers"][1] == ["q2", 1]
    assert dict(headers)[b"Content-Length"] == str(len(body)).encode()

    # fires once; later casts pass untouched
    _, _, second = proxy._maybe_tamper(*cast_message())
    assert json.loads(second)["vote"]["answers"][0] == ["q1", 0]

    # non-cast traffic is never touched
    other = (b"GET /vote/form HTTP/1.1", [(b"Host", b"x")], b"")
    assert proxy._maybe_tamper(*other) == other


def test_read_and_scrub_framing():
    import io

    raw = b"POST /vote/cast HTTP/1.1\r\nHost: h\r\nCookie: c=1\r\nContent-Length: 4\r\n\r\nabcd"
    start, headers, body = anonymizer.read_http_message(io.BytesIO(raw))
    assert start == b"POST /vote/cast HTTP/1.1"
    assert body == b"abcd"
    scrubbed = anonymizer.scrub_request(start, headers, body)
    assert b"Cookie" not in scrubbed and b"cookie" not in scrubbed
    assert scrubbed.endswith(b"\r\n\r\nabcd")
    assert b"Connection: close" in scrubbed
    assert anonymizer.read_http_message(io.BytesIO(b"")) is None
