"""Authentication server: redeems single-use tokens into vote authorizations.

Authenticates voters against salted password verifiers, marks token digests
used exactly once, and hands out authorizations signed with the server key
and sealed to the ballot server — directly in plain mode, or as a blind
signature over a client-chosen value in blind mode, where this server never
learns the number it is authorizing. Every privileged action lands in a
hash-chained audit log; while the server is sealed, administrative reads
are refused and the refusal itself is recorded.
"""

from __future__ import annotations

import argparse
import hmac
import io
import json
import os
import tarfile
import threading
import time
from pathlib import Path
from typing import Any, Optional

from . import crypto, model
from .audit import AuditLog
from .httpd import ApiError, App, Request, json_get, require_secret, serve

SESSION_TTL_SECONDS = 15 * 60
SESSION_BITS = 128


def cheating_enabled(config: dict[str, Any], flag: str) -> bool:
    """Adversary hooks exist for the scenario harness only: they need both
    the config flag and the environment opt-in, so a release config alone
    can never switch them on."""
    return flag in config.get("adversaries", ()) and os.environ.get("BALLOT_HARNESS_CHEAT") == "1"


class AuthServer:
    def __init__(self, state_dir: Path | str):
        self.state_dir = Path(state_dir)
        self.config = json.loads((self.state_dir / "config.json").read_text(encoding="utf-8"))
        keys = self.config["keys"]
        self.key = crypto.KeyPair.load(self.state_dir / keys["server_private"], role="auth-srv")
        self.votesrv_pub = crypto.PublicKey.load(self.state_dir / keys["votesrv_public"])
        self.authmgr_pub = crypto.PublicKey.load(self.state_dir / keys["authmgr_public"])
        self.credentials = json.loads((self.state_dir / "credentials.json").read_text(encoding="utf-8"))
        self.audit = AuditLog(self.state_dir / "audit.log")
        self.mode = self.config["mode"]
        self.pin_required = bool(self.config.get("pin_required", True))
        self.sessions: dict[str, tuple[str, float]] = {}
        self._sessions_lock = threading.Lock()
        self._token_locks: dict[str, threading.Lock] = {}
        self._token_locks_guard = threading.Lock()
        (self.state_dir / "tokens" / "used").mkdir(parents=True, exist_ok=True)
        (self.state_dir / "authz" / "issued").mkdir(parents=True, exist_ok=True)

    # -- lifecycle state ---------------------------------------------------

    @property
    def sealed(self) -> bool:
        return (self.state_dir / "SEALED").exists()

    @property
    def closed(self) -> bool:
        if (self.state_dir / "CLOSED").exists():
            return True
        return model.parse_timestamp(self.config["close_at"]) <= model.parse_timestamp(model.now_timestamp())

    def _token_lock(self, digest_hex: str) -> threading.Lock:
        with self._token_locks_guard:
            return self._token_locks.setdefault(digest_hex, threading.Lock())

    # -- voter operations ----------------------------------------------------

    def authenticate(self, username: str, password: str) -> str:
        if self.closed:
            raise ApiError(403, "ballot-closed", "the ballot window has ended")
        entry = self.credentials.get(username)
        # Verify against a dummy entry when the user is unknown so the two
        # rejections take the same hashing work.
        salt = bytes.fromhex(entry["salt"]) if entry else b"\x00" * 16
        expected = bytes.fromhex(entry["verifier"]) if entry else b"\x00" * 32
        presented = model.hash_password(password, salt)
        if not hmac.compare_digest(presented, expected):
            self.audit.append("voter", "login", {"username": username}, allowed=False)
            raise ApiError(401, "bad-credentials", "unknown user or wrong password")
        session = crypto.random_string(SESSION_BITS).hex()
        with self._sessions_lock:
            self.sessions[session] = (username, time.monotonic() + SESSION_TTL_SECONDS)
        self.audit.append("voter", "login", {"username": username}, allowed=True)
        return session

    def _session_user(self, session: str) -> str:
        with self._sessions_lock:
            entry = self.sessions.get(session)
            if entry is None or entry[1] < time.monotonic():
                self.sessions.pop(session, None)
                raise ApiError(401, "bad-session", "session unknown or expired")
            return entry[0]

    def _check_token(self, token_text: str) -> str:
        """Parse and validate a presented token; returns its digest hex."""
        try:
            token = model.VoteToken.from_text(token_text)
        except ValueError as exc:  # covers binascii.Error from base32 decoding
            raise ApiError(404, "unknown-token", "token is not a provisioned credential") from exc
        digest_hex = token.digest.hex
        if not (self.state_dir / "tokens" / "valid" / digest_hex).exists():
            raise ApiError(404, "unknown-token", "token is not a provisioned credential")
        return digest_hex

    def _mark_token_used(self, digest_hex: str, username: str) -> str:
        """Check-and-mark, atomic per token digest. Returns the usage time."""
        used_at = model.now_timestamp()
        record = model.to_wire({"token_digest": digest_hex, "used_at": used_at, "username": username})
        envelope = crypto.seal(record, self.key, self.authmgr_pub)
        path = self.state_dir / "tokens" / "used" / f"{digest_hex}.sealed"
        try:
            with path.open("xb") as fh:
                fh.write(envelope.to_bytes())
        except FileExistsError:
            raise ApiError(409, "token-already-used", "this token has already been redeemed") from None
        return used_at

    def _build_authorization(self) -> model.VoteAuthorization:
        prn = model.fresh_prn()
        pin = model.fresh_pin() if self.pin_required else None
        issued_at = model.now_timestamp()
        unsigned = {
            "ballot_id": self.config["ballot_id"],
            "issued_at": issued_at,
            "pin": pin,
            "prn": prn.hex(),
        }
        signature = self.key.sign(model.to_wire(unsigned)).hex()
        return model.VoteAuthorization(
            prn=prn,
            ballot_id=self.config["ballot_id"],
            mode="plain",
            signature=signature,
            pin=pin,
            issued_at=issued_at,
        )

    def _write_issued_record(self, authorization: model.VoteAuthorization) -> None:
        envelope = crypto.seal(model.to_wire(authorization.to_dict()), self.key, self.authmgr_pub)
        path = self.state_dir / "authz" / "issued" / f"{authorization.prn_digest.hex}.sealed"
        with path.open("xb") as fh:
            fh.write(envelope.to_bytes())

    def redeem(self, session: str, token_text: str) -> tuple[bytes, Optional[str]]:
        if self.mode != "plain":
            raise ApiError(400, "wrong-mode", "server runs in blind mode; use blind-redeem")
        if self.closed:
            raise ApiError(403, "ballot-closed", "the ballot window has ended")
        username = self._session_user(session)
        digest_hex = self._check_token(token_text)
        with self._token_lock(digest_hex):
            self._mark_token_used(digest_hex, username)
            authorization = self._build_authorization()
            self._write_issued_record(authorization)
            self.audit.append("server", "redeem", {"token_digest": digest_hex, "username": username})
        if cheating_enabled(self.config, "cheat-log"):
            self._cheat_log(
                {"username": username, "token_digest": digest_hex, "prn": authorization.prn.hex()}
            )
        sealed = crypto.seal(model.to_wire(authorization.to_dict()), self.key, self.votesrv_pub)
        return sealed.to_bytes(), authorization.pin

    def blind_redeem(self, session: str, token_text: str, blinded_message_hex: str) -> str:
        if self.mode != "blind":
            raise ApiError(400, "wrong-mode", "server runs in plain mode; use redeem")
        if self.closed:
            raise ApiError(403, "ballot-closed", "the ballot window has ended")
        username = self._session_user(session)
        try:
            blinded = crypto.hex_to_int(blinded_message_hex)
        except ValueError:
            raise ApiError(400, "vote-invalid", "blinded message is not a hex integer") from None
        digest_hex = self._check_token(token_text)
        with self._token_lock(digest_hex):
            self._mark_token_used(digest_hex, username)
            self.audit.append("server", "blind-redeem", {"token_digest": digest_hex, "username": username})
        blinded_signature = crypto.blind_sign(blinded, self.key)
        if cheating_enabled(self.config, "cheat-log"):
            # Everything a cheating operator can see in this mode: the
            # blinded value carries no information about the prn inside.
            self._cheat_log(
                {
                    "username": username,
                    "token_digest": digest_hex,
                    "blinded_message": blinded_message_hex,
                }
            )
        return crypto.int_to_hex(blinded_signature)

    # -- administrative operations -----------------------------------------

    def _admin_actor(self, request: Request) -> str:
        secret = request.bearer_secret() or ""
        if hmac.compare_digest(secret, self.config["secrets"]["manager"]):
            return "authmgr"
        if hmac.compare_digest(secret, self.config["secrets"]["sysmgr"]):
            return "authsysmgr"
        raise ApiError(401, "unauthorized", "bad or missing bearer credential")

    def _refuse_if_sealed(self, actor: str, action: str) -> None:
        if self.sealed:
            self.audit.append(actor, action, {"while_sealed": True}, allowed=False)
            raise ApiError(403, "sealed", "server is sealed; access attempt recorded")

    def seal(self, actor: str) -> dict[str, Any]:
        (self.state_dir / "SEALED").touch()
        return self.audit.append(actor, "seal", {})

    def unseal(self, actor: str) -> dict[str, Any]:
        (self.state_dir / "SEALED").unlink(missing_ok=True)
        return self.audit.append(actor, "unseal", {})

    def close(self, actor: str) -> dict[str, Any]:
        (self.state_dir / "CLOSED").touch()
        return self.audit.append(actor, "close", {})

    def export_archive(self) -> bytes:
        """Everything the manager needs for reconciliation, as a tar."""
        buffer = io.BytesIO()
        with tarfile.open(fileobj=buffer, mode="w") as tar:
            for subdir, arcname in (
                (self.state_dir / "tokens" / "used", "used"),
                (self.state_dir / "authz" / "issued", "issued"),
                (self.state_dir / "tokens" / "valid", "valid"),
            ):
                for path in sorted(subdir.iterdir()):
                    tar.add(path, arcname=f"{arcname}/{path.name}")
            for name in ("audit.log", "audit.head"):
                path = self.state_dir / name
                if path.exists():
                    tar.add(path, arcname=name)
        return buffer.getvalue()

    def unused_token_digests(self) -> list[str]:
        valid = {p.name for p in (self.state_dir / "tokens" / "valid").iterdir()}
        used = {p.name.removesuffix(".sealed") for p in (self.state_dir / "tokens" / "used").iterdir()}
        return sorted(valid - used)

    # -- adversary hooks (harness only) --------------------------------------

    def _cheat_log(self, record: dict[str, Any]) -> None:
        cheat_dir = self.state_dir / "cheat"
        cheat_dir.mkdir(exist_ok=True)
        with (cheat_dir / "log.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def cheat_issue(self) -> tuple[bytes, Optional[str]]:
        """double-issue: mint an authorization with no token behind it."""
        authorization = self._build_authorization()
        self._write_issued_record(authorization)
        sealed = crypto.seal(model.to_wire(authorization.to_dict()), self.key, self.votesrv_pub)
        return sealed.to_bytes(), authorization.pin

    def cheat_ghost(self, token_digest_hex: str, username: str) -> tuple[bytes, Optional[str]]:
        """ghost-vote: fabricate the full record column for an unredeemed
        token, bypassing the audit log the way direct file access would."""
        used_at = model.now_timestamp()
        record = model.to_wire({"token_digest": token_digest_hex, "used_at": used_at, "username": username})
        path = self.state_dir / "tokens" / "used" / f"{token_digest_hex}.sealed"
        path.write_bytes(crypto.seal(record, self.key, self.authmgr_pub).to_bytes())
        authorization = self._build_authorization()
        self._write_issued_record(authorization)
        sealed = crypto.seal(model.to_wire(authorization.to_dict()), self.key, self.votesrv_pub)
        return sealed.to_bytes(), authorization.pin


def build_app(server: AuthServer) -> App:
    app = App(key_id=server.key.key_id)

    @app.route("GET", "/auth/ping")
    def ping(request: Request) -> tuple[int, Any]:
        return 200, {"ballot_id": server.config["ballot_id"], "mode": server.mode, "status": "ok"}

    @app.route("POST", "/auth/login")
    def login(request: Request) -> tuple[int, Any]:
        body = request.json()
        username = json_get(body, "username", str)
        password = json_get(body, "password", str)
        session = server.authenticate(username, password)
        return 200, {"session": session, "ttl_seconds": SESSION_TTL_SECONDS}

    @app.route("POST", "/auth/redeem")
    def redeem(request: Request) -> tuple[int, Any]:
        body = request.json()
        sealed, pin = server.redeem(json_get(body, "session", str), json_get(body, "vote_token", str))
        # The PIN travels outside the envelope on purpose: the voter must
        # see it, and the envelope is addressed to the ballot server.
        return 200, {"pin": pin, "sealed_authorization": sealed.hex()}

    @app.route("POST", "/auth/blind-redeem")
    def blind_redeem(request: Request) -> tuple[int, Any]:
        body = request.json()
        signature = server.blind_redeem(
            json_get(body, "session", str),
            json_get(body, "vote_token", str),
            json_get(body, "blinded_message", str),
        )
        return 200, {"blinded_signature": signature}

    @app.route("POST", "/admin/seal")
    def admin_seal(request: Request) -> tuple[int, Any]:
        actor = server._admin_actor(request)
        if actor != "authmgr":
            raise ApiError(401, "unauthorized", "sealing is a manager operation")
        return 200, {"entry": server.seal(actor)}

    @app.route("POST", "/admin/unseal")
    def admin_unseal(request: Request) -> tuple[int, Any]:
        actor = server._admin_actor(request)
        if actor != "authmgr":
            raise ApiError(401, "unauthorized", "unsealing is a manager operation")
        return 200, {"entry": server.unseal(actor)}

    @app.route("POST", "/admin/close")
    def admin_close(request: Request) -> tuple[int, Any]:
        actor = server._admin_actor(request)
        if actor != "authmgr":
            raise ApiError(401, "unauthorized", "closing is a manager operation")
        return 200, {"entry": server.close(actor)}

    @app.route("GET", "/admin/export")
    def admin_export(request: Request) -> tuple[int, Any]:
        actor = server._admin_actor(request)
        server._refuse_if_sealed(actor, "export")
        if not server.closed:
            raise ApiError(409, "ballot-still-open", "export is a post-close operation")
        server.audit.append(actor, "export", {})
        return 200, server.export_archive()

    @app.route("GET", "/admin/unused-tokens")
    def admin_unused(request: Request) -> tuple[int, Any]:
        actor = server._admin_actor(request)
        server._refuse_if_sealed(actor, "unused-tokens")
        server.audit.append(actor, "unused-tokens", {})
        return 200, {"unused_token_digests": server.unused_token_digests()}

    @app.route("POST", "/admin/cheat/issue")
    def cheat_issue(request: Request) -> tuple[int, Any]:
        if not cheating_enabled(server.config, "double-issue"):
            raise ApiError(404, "not-found", "")
        require_secret(request, server.config["secrets"]["sysmgr"])
        sealed, pin = server.cheat_issue()
        return 200, {"pin": pin, "sealed_authorization": sealed.hex()}

    @app.route("POST", "/admin/cheat/ghost-vote")
    def cheat_ghost(request: Request) -> tuple[int, Any]:
        if not cheating_enabled(server.config, "ghost-vote"):
            raise ApiError(404, "not-found", "")
        require_secret(request, server.config["secrets"]["sysmgr"])
        body = request.json()
        sealed, pin = server.cheat_ghost(
            json_get(body, "token_digest", str), json_get(body, "username", str)
        )
        return 200, {"pin": pin, "sealed_authorization": sealed.hex()}

    return app


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="ballot authentication server")
    parser.add_argument("--state-dir", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    args = parser.parse_args(argv)
    server = AuthServer(args.state_dir)
    httpd = serve(build_app(server), args.state_dir, args.host, args.port)
    print(f"auth server on {args.host}:{httpd.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
