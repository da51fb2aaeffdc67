"""Anonymizing proxy between voter clients and the ballot server.

Works at the connection level: it re-reads each HTTP request, drops the
headers that could identify the client, and re-issues the request from its
own address, so the upstream server sees one peer for everybody. In nat
mode requests are relayed immediately; in mix mode they are held until a
batch fills (or a hold timer expires) and forwarded in a uniformly random
order, severing the arrival-order correlation as well.

The proxy keeps no state about who connected. The scenario harness can
flip that with a cheating flag — the exact misbehavior a dishonest
operator would commit — but only with an explicit environment opt-in.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import socket
import socketserver
import threading
import time
from pathlib import Path
from typing import Any, BinaryIO, Optional

from .model import to_wire

# Hop-by-hop headers (proxy-owned) plus anything that fingerprints the client.
STRIPPED_HEADERS = {
    b"connection",
    b"keep-alive",
    b"proxy-authenticate",
    b"proxy-authorization",
    b"te",
    b"trailer",
    b"transfer-encoding",
    b"upgrade",
    b"user-agent",
    b"referer",
    b"cookie",
    b"accept-language",
    b"x-forwarded-for",
    b"x-forwarded-host",
    b"x-forwarded-proto",
    b"forwarded",
    b"via",
    b"from",
}

_shuffle_rng = random.SystemRandom()


def cheating_enabled(config: dict[str, Any], flag: str) -> bool:
    return flag in config.get("adversaries", ()) and os.environ.get("BALLOT_HARNESS_CHEAT") == "1"


def read_http_message(rfile: BinaryIO) -> Optional[tuple[bytes, list[tuple[bytes, bytes]], bytes]]:
    """Read one framed HTTP message: (start line, headers, body)."""
    start = rfile.readline()
    if not start.strip():
        return None
    headers: list[tuple[bytes, bytes]] = []
    while True:
        line = rfile.readline()
        if line in (b"\r\n", b"\n", b""):
            break
        name, _, value = line.partition(b":")
        headers.append((name.strip(), value.strip()))
    length = 0
    for name, value in headers:
        if name.lower() == b"content-length":
            length = int(value)
    body = rfile.read(length) if length > 0 else b""
    return start.rstrip(b"\r\n"), headers, body


def scrub_request(start: bytes, headers: list[tuple[bytes, bytes]], body: bytes) -> bytes:
    """Drop identifying and hop-by-hop headers, close the upstream hop."""
    kept = [(n, v) for n, v in headers if n.lower() not in STRIPPED_HEADERS]
    kept.append((b"Connection", b"close"))
    lines = [start] + [n + b": " + v for n, v in kept]
    return b"\r\n".join(lines) + b"\r\n\r\n" + body


def assemble_response(start: bytes, headers: list[tuple[bytes, bytes]], body: bytes) -> bytes:
    kept = [(n, v) for n, v in headers if n.lower() not in (b"connection", b"keep-alive")]
    kept.append((b"Connection", b"close"))
    lines = [start] + [n + b": " + v for n, v in kept]
    return b"\r\n".join(lines) + b"\r\n\r\n" + body


def gateway_error_response() -> bytes:
    body = to_wire({"detail": "the ballot server did not answer", "error": "upstream-unreachable"})
    return (
        b"HTTP/1.1 502 Bad Gateway\r\nContent-Type: application/json\r\nContent-Length: "
        + str(len(body)).encode("ascii")
        + b"\r\nConnection: close\r\n\r\n"
        + body
    )


class PendingRequest:
    """One held request in mix mode: bytes to send, slot for the answer."""

    def __init__(self, request_bytes: bytes, client_address: tuple[str, int]):
        self.request_bytes = request_bytes
        self.client_address = client_address
        self.arrived = time.monotonic()
        self.done = threading.Event()
        self.response: bytes = gateway_error_response()


class Mixer:
    """Serialized batching queue; forwards each full batch in shuffled order."""

    def __init__(self, proxy: "Anonymizer", batch_size: int, max_hold: float):
        self.proxy = proxy
        self.batch_size = batch_size
        self.max_hold = max_hold
        self._pending: list[PendingRequest] = []
        self._cv = threading.Condition()
        self._stop = False
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    @staticmethod
    def forward_order(batch: list) -> list:
        """The mix permutation: a uniform shuffle from the crypto RNG."""
        shuffled = list(batch)
        _shuffle_rng.shuffle(shuffled)
        return shuffled

    def submit(self, entry: PendingRequest) -> None:
        with self._cv:
            self._pending.append(entry)
            self._cv.notify()

    def stop(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify()

    def _loop(self) -> None:
        while True:
            with self._cv:
                while not self._stop:
                    if len(self._pending) >= self.batch_size:
                        break
                    if self._pending:
                        age = time.monotonic() - self._pending[0].arrived
                        if age >= self.max_hold:
                            break
                        self._cv.wait(timeout=self.max_hold - age)
                    else:
                        self._cv.wait()
                if self._stop:
                    return
                batch, self._pending = self._pending, []
            for entry in self.forward_order(batch):
                entry.response = self.proxy.forward_upstream(entry.request_bytes, entry.client_address)
                entry.done.set()


class Anonymizer:
    def __init__(self, state_dir: Path | str):
        self.state_dir = Path(state_dir)
        self.config = json.loads((self.state_dir / "config.json").read_text(encoding="utf-8"))
        self.mode = self.config["mode"]
        if self.mode not in ("nat", "mix"):
            raise ValueError(f"unknown anonymizer mode {self.mode!r}")
        self.batch_size = int(self.config.get("batch_size", 4))
        if self.mode == "mix" and self.batch_size < 2:
            raise ValueError("mix mode needs batch_size >= 2")
        self.max_hold = float(self.config.get("max_hold_seconds", 0.5))
        host, _, port = self.config["upstream"].partition(":")
        self.upstream = (host, int(port))
        self.mixer = Mixer(self, self.batch_size, self.max_hold) if self.mode == "mix" else None
        self._log_lock = threading.Lock()
        self.log_clients = cheating_enabled(self.config, "cheat-log")
        self.tamper = cheating_enabled(self.config, "tamper")
        self._tamper_fired = False

    # -- forwarding -------------------------------------------------------------

    def forward_upstream(self, request_bytes: bytes, client_address: tuple[str, int]) -> bytes:
        if self.log_clients:
            self._record_client(request_bytes, client_address)
        try:
            with socket.create_connection(self.upstream, timeout=30) as upstream:
                upstream.sendall(request_bytes)
                with upstream.makefile("rb") as rfile:
                    message = read_http_message(rfile)
        except OSError:
            return gateway_error_response()
        if message is None:
            return gateway_error_response()
        return assemble_response(*message)

    def handle_client(self, rfile: BinaryIO, wfile: BinaryIO, client_address: tuple[str, int]) -> None:
        message = read_http_message(rfile)
        if message is None:
            return
        start, headers, body = message
        if self.tamper:
            start, headers, body = self._maybe_tamper(start, headers, body)
        request_bytes = scrub_request(start, headers, body)
        if self.mixer is not None:
            entry = PendingRequest(request_bytes, client_address)
            self.mixer.submit(entry)
            entry.done.wait(timeout=self.max_hold * 4 + 60)
            wfile.write(entry.response)
        else:
            wfile.write(self.forward_upstream(request_bytes, client_address))

    # -- dishonest-operator behaviors (harness only) ------------------------------

    def _record_client(self, request_bytes: bytes, client_address: tuple[str, int]) -> None:
        record = {
            "client_ip": client_address[0],
            "client_port": client_address[1],
            "forwarded_at": time.time(),
            "request_line": request_bytes.split(b"\r\n", 1)[0].decode("latin-1"),
        }
        with self._log_lock:
            cheat_dir = self.state_dir / "cheat"
            cheat_dir.mkdir(exist_ok=True)
            with (cheat_dir / "log.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _maybe_tamper(
        self, start: bytes, headers: list[tuple[bytes, bytes]], body: bytes
    ) -> tuple[bytes, list[tuple[bytes, bytes]], bytes]:
        """Network man-in-the-middle stand-in: flip the first answer of a
        cast vote in transit. Receipt verification catches this downstream."""
        try:
            target = start.split(b" ")[1]
        except IndexError:
            return start, headers, body
        if target != b"/vote/cast":
            return start, headers, body
        with self._log_lock:
            if self._tamper_fired:
                return start, headers, body
            self._tamper_fired = True
        try:
            payload = json.loads(body.decode("utf-8"))
            answers = payload["vote"]["answers"]
            answers[0][1] = 1 if answers[0][1] == 0 else 0
        except (ValueError, KeyError, IndexError, TypeError):
            return start, headers, body
        new_body = to_wire(payload)
        new_headers = [
            (n, str(len(new_body)).encode("ascii")) if n.lower() == b"content-length" else (n, v)
            for n, v in headers
        ]
        return start, new_headers, new_body


def scrub_log_policy(state_dir: Path | str) -> dict[str, Any]:
    """What this proxy retains about clients: nothing, unless cheating."""
    state = Path(state_dir)
    config = json.loads((state / "config.json").read_text(encoding="utf-8"))
    log_path = state / "cheat" / "log.jsonl"
    records = 0
    if log_path.exists():
        records = sum(1 for line in log_path.read_text(encoding="utf-8").splitlines() if line.strip())
    return {
        "mode": config["mode"],
        "persists_client_data": cheating_enabled(config, "cheat-log"),
        "record_count": records,
    }


class _ProxyHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        proxy: Anonymizer = self.server.proxy  # type: ignore[attr-defined]
        try:
            proxy.handle_client(self.rfile, self.wfile, self.client_address)
        except (OSError, ValueError):
            pass  # client went away or spoke garbage; nothing to salvage


class ProxyServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, proxy: Anonymizer, host: str, port: int):
        super().__init__((host, port), _ProxyHandler)
        self.proxy = proxy

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(proxy: Anonymizer, host: str = "127.0.0.1", port: int = 0) -> ProxyServer:
    server = ProxyServer(proxy, host, port)
    (proxy.state_dir / "port").write_text(f"{server.port}\n", encoding="utf-8")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="anonymizing vote proxy")
    parser.add_argument("--state-dir", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    args = parser.parse_args(argv)
    proxy = Anonymizer(args.state_dir)
    server = serve(proxy, args.host, args.port)
    print(f"anonymizer ({proxy.mode}) on {args.host}:{server.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
