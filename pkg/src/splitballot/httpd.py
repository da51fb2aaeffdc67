"""Shared HTTP plumbing for the ballot servers.

Thin JSON routing over the stdlib ThreadingHTTPServer. Every response
carries an X-Key-Id header naming the server's public key, which clients
pin before sending anything sensitive — the moral equivalent of checking
a TLS certificate fingerprint. Binding to port 0 writes the chosen port
to a file in the state directory so a supervisor can find it.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional

from .model import from_wire, to_wire

MAX_BODY_BYTES = 1 << 20


class ApiError(Exception):
    """An error the server reports to the client as JSON."""

    def __init__(self, status: int, code: str, detail: str = ""):
        super().__init__(code)
        self.status = status
        self.code = code
        self.detail = detail


@dataclass
class Request:
    method: str
    path: str
    headers: dict[str, str]
    body: bytes
    client_address: tuple[str, int]

    def json(self) -> dict[str, Any]:
        try:
            return from_wire(self.body)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ApiError(400, "vote-invalid", f"body is not a JSON object: {exc}") from exc

    def bearer_secret(self) -> Optional[str]:
        auth = self.headers.get("authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer "):]
        return None


Response = tuple[int, Any]  # payload: dict -> JSON, bytes -> octet-stream
Route = Callable[[Request], Response]


@dataclass
class App:
    """Route table plus the identity every response is stamped with."""

    key_id: str
    routes: dict[tuple[str, str], Route] = field(default_factory=dict)

    def route(self, method: str, path: str) -> Callable[[Route], Route]:
        def register(fn: Route) -> Route:
            self.routes[(method, path)] = fn
            return fn

        return register

    def dispatch(self, request: Request) -> Response:
        handler = self.routes.get((request.method, request.path))
        if handler is None:
            raise ApiError(404, "not-found", f"no handler for {request.method} {request.path}")
        return handler(request)


class _Handler(BaseHTTPRequestHandler):
    server_version = "ballotd/0.1"
    protocol_version = "HTTP/1.1"

    def _respond(self) -> None:
        app: App = self.server.app  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            self._send(413, {"error": "vote-invalid", "detail": "body too large"}, app.key_id)
            return
        body = self.rfile.read(length) if length else b""
        request = Request(
            method=self.command,
            path=self.path.split("?")[0],
            headers={k.lower(): v for k, v in self.headers.items()},
            body=body,
            client_address=self.client_address,
        )
        try:
            status, payload = app.dispatch(request)
        except ApiError as exc:
            self._send(exc.status, {"error": exc.code, "detail": exc.detail}, app.key_id)
            return
        except Exception as exc:  # noqa: BLE001 - a handler bug must not kill the thread
            self._send(500, {"error": "internal", "detail": str(exc)}, app.key_id)
            return
        self._send(status, payload, app.key_id)

    def _send(self, status: int, payload: Any, key_id: str) -> None:
        if isinstance(payload, bytes):
            blob, content_type = payload, "application/octet-stream"
        else:
            blob, content_type = to_wire(payload), "application/json"
        self.send_response(status)
        self.send_header("X-Key-Id", key_id)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    do_GET = _respond
    do_POST = _respond

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass  # request logging is the audit log's job, not stderr's


class BallotHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, app: App, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.app = app

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(app: App, state_dir: Path | str, host: str = "127.0.0.1", port: int = 0) -> BallotHTTPServer:
    """Bind, record the port in <state_dir>/port, and serve on a daemon thread."""
    server = BallotHTTPServer(app, host, port)
    Path(state_dir, "port").write_text(f"{server.port}\n", encoding="utf-8")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def read_port_file(state_dir: Path | str) -> int:
    return int(Path(state_dir, "port").read_text(encoding="utf-8").strip())


def require_secret(request: Request, expected: str, error_code: str = "unauthorized") -> None:
    import hmac

    presented = request.bearer_secret()
    if presented is None or not hmac.compare_digest(presented, expected):
        raise ApiError(401, error_code, "bad or missing bearer credential")


def json_get(data: dict[str, Any], key: str, kind: type, error_code: str = "vote-invalid") -> Any:
    if key not in data or not isinstance(data[key], kind):
        raise ApiError(400, error_code, f"missing or malformed field {key!r}")
    return data[key]
