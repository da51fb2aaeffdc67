"""Ballot server: accepts exactly one vote per authorization, issues receipts.

Opens the sealed authorization, checks the authentication server's signature
(plain PKCS#1 or unblinded raw-RSA), enforces single use per pseudorandom
number, checks the PIN with a three-strike lockout, and persists each vote
sealed to the counting manager under a filename equal to its verification
code. The receipt signs that code, so the voter can recompute and hold the
server to what it stored.

This server never sees a username, a token, or (behind the anonymizer) a
real client address — by design it cannot say who cast what.
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
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Optional

from . import crypto, model
from .httpd import ApiError, App, Request, json_get, require_secret, serve

PIN_MAX_FAILURES = 3


def cheating_enabled(config: dict[str, Any], flag: str) -> bool:
    return flag in config.get("adversaries", ()) and os.environ.get("BALLOT_HARNESS_CHEAT") == "1"


class ReceiptClock:
    """Wall clock nudged forward so receipt timestamps never repeat."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._last = datetime.min.replace(tzinfo=timezone.utc)

    def next_timestamp(self) -> str:
        with self._lock:
            now = datetime.now(timezone.utc)
            if now <= self._last:
                now = self._last + timedelta(microseconds=1)
            self._last = now
            return model.format_timestamp(now)


class VoteServer:
    def __init__(self, state_dir: Path | str):
        self.state_dir = Path(state_dir)
        self.config = json.loads((self.state_dir / "config.json").read_text(encoding="utf-8"))
        keys = self.config["keys"]
        self.key = crypto.KeyPair.load(self.state_dir / keys["server_private"], role="vote-srv")
        self.authsrv_pub = crypto.PublicKey.load(self.state_dir / keys["authsrv_public"])
        self.authmgr_pub = crypto.PublicKey.load(self.state_dir / keys["authmgr_public"])
        self.votemgr_pub = crypto.PublicKey.load(self.state_dir / keys["votemgr_public"])
        self.clientproxy_pub = crypto.PublicKey.load(self.state_dir / keys["clientproxy_public"])
        self.spec = model.BallotSpec.load(self.state_dir / "ballot.json")
        self.mode = self.config["mode"]
        self.pin_required = bool(self.config.get("pin_required", True))
        self.clock = ReceiptClock()
        self._authz_locks: dict[str, threading.Lock] = {}
        self._authz_locks_guard = threading.Lock()
        self._pin_failures: dict[str, int] = {}
        self._spec_wire = model.to_wire(self.spec.to_dict())
        # adversary state
        self._first_receipt: Optional[dict[str, Any]] = None
        self._replay_fired = False
        self._modify_fired = False
        self._cheat_lock = threading.Lock()
        (self.state_dir / "authz" / "used").mkdir(parents=True, exist_ok=True)
        (self.state_dir / "votes").mkdir(parents=True, exist_ok=True)

    @property
    def closed(self) -> bool:
        if (self.state_dir / "CLOSED").exists():
            return True
        return model.parse_timestamp(self.spec.close_at) <= datetime.now(timezone.utc)

    @property
    def open_for_votes(self) -> bool:
        return self.spec.is_open() and not (self.state_dir / "CLOSED").exists()

    def _authz_lock(self, digest_hex: str) -> threading.Lock:
        with self._authz_locks_guard:
            return self._authz_locks.setdefault(digest_hex, threading.Lock())

    # -- casting --------------------------------------------------------------

    def _open_authorization(self, envelope_hex: str) -> model.VoteAuthorization:
        try:
            envelope = crypto.SealedEnvelope.from_bytes(bytes.fromhex(envelope_hex))
        except (ValueError, crypto.DecryptionFailed) as exc:
            raise ApiError(400, "authorization-invalid", "authorization envelope is malformed") from exc
        expected_signer = self.authsrv_pub if self.mode == "plain" else self.clientproxy_pub
        try:
            payload = crypto.open_envelope(envelope, self.key, expected_signer)
        except crypto.CryptoError as exc:
            raise ApiError(400, "authorization-invalid", f"envelope rejected: {exc}") from exc
        try:
            authorization = model.VoteAuthorization.from_dict(model.from_wire(payload))
        except (ValueError, KeyError) as exc:
            raise ApiError(400, "authorization-invalid", "authorization content is malformed") from exc
        if authorization.mode != self.mode:
            raise ApiError(400, "authorization-invalid", "authorization mode does not match the server")
        if not authorization.verify(self.authsrv_pub):
            raise ApiError(400, "authorization-invalid", "issuer signature does not verify")
        if authorization.mode == "plain" and authorization.ballot_id != self.spec.ballot_id:
            raise ApiError(400, "authorization-invalid", "authorization is for a different ballot")
        return authorization

    def _parse_vote(self, body: dict[str, Any]) -> model.Vote:
        try:
            vote = model.Vote.from_dict(json_get(body, "vote", dict))
            vote.validate(self.spec)
        except (ValueError, KeyError, TypeError) as exc:
            raise ApiError(400, "vote-invalid", str(exc)) from exc
        return vote

    def _check_pin(self, authorization: model.VoteAuthorization, presented: Optional[str], digest_hex: str) -> None:
        if authorization.pin is None:
            return
        if presented is not None and hmac.compare_digest(presented, authorization.pin):
            self._pin_failures.pop(digest_hex, None)
            return
        failures = self._pin_failures.get(digest_hex, 0) + 1
        self._pin_failures[digest_hex] = failures
        raise ApiError(403, "pin-mismatch", f"wrong PIN ({failures} of {PIN_MAX_FAILURES} attempts used)")

    def _store_vote(self, vote: model.Vote, code: crypto.Digest, timestamp: str, salt: bytes) -> None:
        stored = model.to_wire(
            {
                "random_string": salt.hex(),
                "timestamp": timestamp,
                "verification_code": code.hex,
                "vote": vote.to_dict(),
            }
        )
        envelope = crypto.seal(stored, self.key, self.votemgr_pub)
        with (self.state_dir / "votes" / f"{code.hex}.sealed").open("xb") as fh:
            fh.write(envelope.to_bytes())

    def _write_used_record(self, authorization: model.VoteAuthorization, digest_hex: str) -> None:
        envelope = crypto.seal(model.to_wire(authorization.to_dict()), self.key, self.authmgr_pub)
        try:
            with (self.state_dir / "authz" / "used" / f"{digest_hex}.sealed").open("xb") as fh:
                fh.write(envelope.to_bytes())
        except FileExistsError:
            raise ApiError(409, "authorization-already-used", "this authorization has already voted") from None

    def cast(self, body: dict[str, Any]) -> dict[str, Any]:
        if not self.open_for_votes:
            raise ApiError(403, "ballot-closed", "the ballot window has ended")
        vote = self._parse_vote(body)
        authorization = self._open_authorization(json_get(body, "sealed_authorization", str))
        digest_hex = authorization.prn_digest.hex
        presented_pin = body.get("pin") if isinstance(body.get("pin"), str) else None

        with self._authz_lock(digest_hex):
            if self._pin_failures.get(digest_hex, 0) >= PIN_MAX_FAILURES:
                raise ApiError(423, "authorization-locked", "too many wrong PINs; authorization is locked")
            if (self.state_dir / "authz" / "used" / f"{digest_hex}.sealed").exists():
                raise ApiError(409, "authorization-already-used", "this authorization has already voted")
            self._check_pin(authorization, presented_pin, digest_hex)

            if cheating_enabled(self.config, "code-reuse"):
                replay = self._replay_receipt()
                if replay is not None:
                    return replay

            self._write_used_record(authorization, digest_hex)
            timestamp = self.clock.next_timestamp()
            salt = model.fresh_code_salt()
            code = model.compute_verification_code(vote, self.spec, timestamp, salt)
            stored_vote = self._maybe_modify(vote)
            self._store_vote(stored_vote, code, timestamp, salt)
            receipt = model.sign_receipt(code, timestamp, salt, self.key)

        if cheating_enabled(self.config, "cheat-log"):
            self._cheat_log({"code": code.hex, "prn_digest": digest_hex, "received_at": time.time()})
        if cheating_enabled(self.config, "code-reuse"):
            with self._cheat_lock:
                if self._first_receipt is None:
                    self._first_receipt = receipt.to_dict()
        return receipt.to_dict()

    # -- adversary hooks (harness only) ---------------------------------------

    def _maybe_modify(self, vote: model.Vote) -> model.Vote:
        """vote-sysmgr-modify: silently store a different first vote than cast."""
        if not cheating_enabled(self.config, "modify"):
            return vote
        with self._cheat_lock:
            if self._modify_fired:
                return vote
            self._modify_fired = True
        qid, idx = vote.answers[0]
        flipped = ((qid, 1 if idx == 0 else 0),) + vote.answers[1:]
        return model.Vote(ballot_id=vote.ballot_id, answers=flipped)

    def _replay_receipt(self) -> Optional[dict[str, Any]]:
        """vote-sysmgr-code-reuse: hand the next voter the first voter's
        receipt instead of minting a fresh code — the code points at a vote
        file that already exists, so nothing is stored and nothing is burned.
        A duplicate the client would accept needs the replayed code to
        recompute over the new voter's own vote, i.e. a hash collision."""
        with self._cheat_lock:
            if self._replay_fired or self._first_receipt is None:
                return None
            self._replay_fired = True
            return dict(self._first_receipt)

    def cheat_fabricate(self, count: int) -> list[str]:
        """vote-sysmgr-fabricate: forge votes with no authorization behind them."""
        codes = []
        for _ in range(count):
            answers = tuple((q.question_id, 0) for q in self.spec.questions)
            vote = model.Vote(ballot_id=self.spec.ballot_id, answers=answers)
            timestamp = self.clock.next_timestamp()
            salt = model.fresh_code_salt()
            code = model.compute_verification_code(vote, self.spec, timestamp, salt)
            self._store_vote(vote, code, timestamp, salt)
            codes.append(code.hex)
        return codes

    def _cheat_log(self, record: dict[str, Any]) -> None:
        cheat_dir = self.state_dir / "cheat"
        cheat_dir.mkdir(exist_ok=True)
        with self._cheat_lock:
            with (cheat_dir / "log.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- administrative operations ---------------------------------------------

    def _require_closed(self) -> None:
        if not self.closed:
            raise ApiError(409, "ballot-still-open", "exports are post-close operations")

    def export_tar(self, subdir: str) -> bytes:
        buffer = io.BytesIO()
        with tarfile.open(fileobj=buffer, mode="w") as tar:
            base = self.state_dir / subdir
            for path in sorted(base.iterdir()):
                tar.add(path, arcname=path.name)
        return buffer.getvalue()


def build_app(server: VoteServer) -> App:
    app = App(key_id=server.key.key_id)
    secrets_cfg = server.config["secrets"]

    @app.route("GET", "/vote/form")
    def form(request: Request) -> tuple[int, Any]:
        if not server.open_for_votes:
            raise ApiError(403, "ballot-closed", "the ballot window has ended")
        return 200, server._spec_wire

    @app.route("POST", "/vote/cast")
    def cast(request: Request) -> tuple[int, Any]:
        return 200, server.cast(request.json())

    @app.route("POST", "/admin/close")
    def close(request: Request) -> tuple[int, Any]:
        require_secret(request, secrets_cfg["manager"])
        (server.state_dir / "CLOSED").touch()
        return 200, {"closed": True}

    @app.route("GET", "/admin/export-authz")
    def export_authz(request: Request) -> tuple[int, Any]:
        require_secret(request, secrets_cfg["authmgr"])
        server._require_closed()
        return 200, server.export_tar("authz/used")

    @app.route("GET", "/admin/export-votes")
    def export_votes(request: Request) -> tuple[int, Any]:
        require_secret(request, secrets_cfg["votemgr"])
        server._require_closed()
        return 200, server.export_tar("votes")

    @app.route("POST", "/admin/cheat/fabricate")
    def cheat_fabricate(request: Request) -> tuple[int, Any]:
        if not cheating_enabled(server.config, "fabricate"):
            raise ApiError(404, "not-found", "")
        require_secret(request, secrets_cfg["sysmgr"])
        count = json_get(request.json(), "count", int)
        return 200, {"codes": server.cheat_fabricate(count)}

    return app


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="ballot vote server")
    parser.add_argument("--state-dir", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    args = parser.parse_args(argv)
    server = VoteServer(args.state_dir)
    httpd = serve(build_app(server), args.state_dir, args.host, args.port)
    print(f"vote server on {args.host}:{httpd.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
