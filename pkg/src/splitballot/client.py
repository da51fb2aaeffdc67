"""Voter-side agent: redeems credentials, casts through the proxy, verifies.

Implements both redemption flavors. In the plain flow the client passes an
opaque envelope (sealed by the authentication server for the ballot server)
straight through. In the blind flow the client invents the authorization
number itself, has its digest signed blind, and is the only party that ever
sees number and identity together — the transcript it sends upstream carries
neither.

Every request is built by hand with a minimal header set: no user agent, no
cookies, nothing for a curious server to fingerprint. Before any credential
leaves the machine, the server's key id (stamped on every response) is
checked against the pinned value from the provisioning hand-off.

The PIN is displayed and forgotten — it is never written to the credential
store, so a stolen store is useless without the voter's memory.
"""

from __future__ import annotations

import argparse
import http.client
import json
import sys
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path
from typing import Any, Optional
from urllib.parse import urlsplit

from . import crypto, model

RECEIPT_SKEW = timedelta(seconds=120)
TOKEN_TIME_WINDOW = timedelta(minutes=15)


class ProtocolError(Exception):
    """The server (or the network) refused; exit code 2 territory."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class VerificationFailure(Exception):
    """A cryptographic check failed — evidence of misbehavior; exit code 3."""


@dataclass
class ClientConfig:
    auth_url: str
    anon_url: str
    mode: str
    ballot_id: str
    auth_key_id: str
    vote_key_id: str
    auth_public: str
    vote_public: str
    client_proxy_private: str
    store_dir: str

    @classmethod
    def load(cls, path: Path | str) -> "ClientConfig":
        base = Path(path).parent
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        def resolve(p: str) -> str:
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p
        return cls(
            auth_url=raw["auth_url"],
            anon_url=raw["anon_url"],
            mode=raw["mode"],
            ballot_id=raw["ballot_id"],
            auth_key_id=raw["pins"]["auth_key_id"],
            vote_key_id=raw["pins"]["vote_key_id"],
            auth_public=resolve(raw["keys"]["auth_public"]),
            vote_public=resolve(raw["keys"]["vote_public"]),
            client_proxy_private=resolve(raw["keys"]["client_proxy_private"]),
            store_dir=resolve(raw["store_dir"]),
        )


@dataclass
class CheckReport:
    """Outcome of the post-publication self-check (one voter's view)."""

    code_present: bool
    vote_matches: bool
    token_usage_time_plausible: bool
    complaint_path: Optional[str] = None

    @property
    def all_green(self) -> bool:
        return self.code_present and self.vote_matches and self.token_usage_time_plausible

    def to_dict(self) -> dict[str, Any]:
        return {
            "all_green": self.all_green,
            "code_present": self.code_present,
            "complaint_path": self.complaint_path,
            "token_usage_time_plausible": self.token_usage_time_plausible,
            "vote_matches": self.vote_matches,
        }


class VoterClient:
    def __init__(self, config: ClientConfig):
        self.config = config
        self.store = Path(config.store_dir)
        self.store.mkdir(parents=True, exist_ok=True, mode=0o700)
        self.auth_pub = crypto.PublicKey.load(config.auth_public)
        self.vote_pub = crypto.PublicKey.load(config.vote_public)
        self.transcript: list[dict[str, Any]] = []
        self.cast_source_port: Optional[int] = None

    # -- transport -------------------------------------------------------------

    def _request(
        self, base_url: str, method: str, path: str, body: Optional[dict[str, Any]] = None
    ) -> tuple[dict[str, Any], str, int]:
        """Minimal-header HTTP exchange. Returns (json body, key id, source port)."""
        parsed = urlsplit(base_url)
        payload = model.to_wire(body) if body is not None else b""
        try:
            conn = http.client.HTTPConnection(parsed.hostname, parsed.port, timeout=120)
            conn.connect()
            source_port = conn.sock.getsockname()[1]
            conn.putrequest(method, path, skip_accept_encoding=True)
            if payload:
                conn.putheader("Content-Type", "application/json")
                conn.putheader("Content-Length", str(len(payload)))
            conn.endheaders(payload if payload else None)
            response = conn.getresponse()
            data = response.read()
            key_id = response.getheader("X-Key-Id", "")
            status = response.status
            conn.close()
        except OSError as exc:
            raise ProtocolError("connection-failed", str(exc)) from exc
        self.transcript.append({"url": base_url, "path": path, "body": payload})
        try:
            parsed_body = json.loads(data.decode("utf-8")) if data else {}
        except ValueError as exc:
            raise ProtocolError("malformed-response", data[:200].decode("utf-8", "replace")) from exc
        if status >= 400:
            raise ProtocolError(parsed_body.get("error", f"http-{status}"), parsed_body.get("detail", ""))
        return parsed_body, key_id, source_port

    def _pin_check(self, presented: str, expected: str, which: str) -> None:
        if presented != expected:
            raise VerificationFailure(
                f"key-id-mismatch: {which} presented {presented!r}, pinned {expected!r} — aborting"
            )

    def preflight_auth(self) -> None:
        """Confirm the authentication server's identity before credentials move."""
        _, key_id, _ = self._request(self.config.auth_url, "GET", "/auth/ping")
        self._pin_check(key_id, self.config.auth_key_id, "auth server")

    def fetch_ballot(self) -> model.BallotSpec:
        """Fetch the form via the anonymizer, checking the ballot server pin."""
        body, key_id, _ = self._request(self.config.anon_url, "GET", "/vote/form")
        self._pin_check(key_id, self.config.vote_key_id, "vote server")
        return model.BallotSpec.from_dict(body)

    # -- credential redemption ----------------------------------------------------

    def login_redeem(self, username: str, password: str, token_text: str) -> Optional[str]:
        """Authenticate, burn the token, store the sealed authorization.

        Returns the PIN (plain mode) for one-time display; it is not stored.
        """
        self.preflight_auth()
        body, _, _ = self._request(
            self.config.auth_url, "POST", "/auth/login",
            {"password": password, "username": username},
        )
        session = body["session"]
        if self.config.mode == "plain":
            pin = self._redeem_plain(session, token_text)
        else:
            pin = self._redeem_blind(session, token_text)
        (self.store / "token.txt").write_text(token_text + "\n", encoding="utf-8")
        (self.store / "redeem-window.json").write_text(
            json.dumps({"redeemed_at": model.now_timestamp()}), encoding="utf-8"
        )
        return pin

    def _redeem_plain(self, session: str, token_text: str) -> Optional[str]:
        body, _, _ = self._request(
            self.config.auth_url, "POST", "/auth/redeem",
            {"session": session, "vote_token": token_text},
        )
        (self.store / "authorization.sealed").write_bytes(bytes.fromhex(body["sealed_authorization"]))
        return body.get("pin")

    def _redeem_blind(self, session: str, token_text: str) -> None:
        prn = model.fresh_prn()
        ctx = crypto.blind(crypto.digest(prn), self.auth_pub)
        body, _, _ = self._request(
            self.config.auth_url, "POST", "/auth/blind-redeem",
            {
                "blinded_message": crypto.int_to_hex(ctx.blinded_message),
                "session": session,
                "vote_token": token_text,
            },
        )
        try:
            signature = crypto.unblind(crypto.hex_to_int(body["blinded_signature"]), ctx)
        except (ValueError, crypto.SignatureInvalid) as exc:
            raise VerificationFailure(f"signature-verification-failed: {exc}") from exc
        if not crypto.verify_blind_signature(signature, crypto.digest(prn), self.auth_pub):
            raise VerificationFailure("signature-verification-failed: unblinded signature rejected")
        authorization = model.VoteAuthorization(
            prn=prn,
            ballot_id=self.config.ballot_id,
            mode="blind",
            signature=crypto.int_to_hex(signature),
        )
        proxy_key = crypto.KeyPair.load(self.config.client_proxy_private, role="client-proxy")
        envelope = crypto.seal(model.to_wire(authorization.to_dict()), proxy_key, self.vote_pub)
        (self.store / "authorization.sealed").write_bytes(envelope.to_bytes())
        return None

    # -- casting -------------------------------------------------------------------

    def cast(self, vote: model.Vote, pin: Optional[str] = None) -> model.VoteReceipt:
        spec = self.fetch_ballot()
        authz_path = self.store / "authorization.sealed"
        if not authz_path.exists():
            raise ProtocolError("no-authorization", "run login-redeem first")
        request: dict[str, Any] = {
            "sealed_authorization": authz_path.read_bytes().hex(),
            "vote": vote.to_dict(),
        }
        if pin is not None:
            request["pin"] = pin
        sent_at = model.now_timestamp()
        body, key_id, source_port = self._request(self.config.anon_url, "POST", "/vote/cast", request)
        answered_at = model.now_timestamp()
        self.cast_source_port = source_port
        self._pin_check(key_id, self.config.vote_key_id, "vote server")
        receipt = model.VoteReceipt.from_dict(body)

        ok, reason = model.verify_receipt(receipt, vote, spec, self.vote_pub)
        if not ok:
            raise VerificationFailure(f"receipt-verification-failed: {reason}")
        # A receipt minted outside this exchange is someone else's receipt,
        # however valid its signature — the code-reuse defense.
        stamped = model.parse_timestamp(receipt.timestamp)
        low = model.parse_timestamp(sent_at) - RECEIPT_SKEW
        high = model.parse_timestamp(answered_at) + RECEIPT_SKEW
        if not low <= stamped <= high:
            raise VerificationFailure(
                f"receipt-timestamp-implausible: {receipt.timestamp} outside [{sent_at}, {answered_at}]"
            )

        (self.store / "receipt.json").write_text(
            json.dumps(receipt.to_dict(), sort_keys=True, indent=1), encoding="utf-8"
        )
        (self.store / "vote.json").write_text(json.dumps(vote.to_dict(), sort_keys=True), encoding="utf-8")
        (self.store / "ballot.json").write_text(json.dumps(spec.to_dict(), sort_keys=True), encoding="utf-8")
        (self.store / "cast-window.json").write_text(
            json.dumps({"answered_at": answered_at, "sent_at": sent_at}), encoding="utf-8"
        )
        return receipt

    # -- offline verification ---------------------------------------------------------

    def _load_stored(self) -> tuple[model.VoteReceipt, model.Vote, model.BallotSpec]:
        try:
            receipt = model.VoteReceipt.from_dict(
                json.loads((self.store / "receipt.json").read_text(encoding="utf-8"))
            )
            vote = model.Vote.from_dict(json.loads((self.store / "vote.json").read_text(encoding="utf-8")))
            spec = model.BallotSpec.from_dict(
                json.loads((self.store / "ballot.json").read_text(encoding="utf-8"))
            )
        except FileNotFoundError as exc:
            raise ProtocolError("no-receipt", "nothing stored; cast a vote first") from exc
        return receipt, vote, spec

    def verify_stored_receipt(self) -> tuple[bool, Optional[str]]:
        receipt, vote, spec = self._load_stored()
        return model.verify_receipt(receipt, vote, spec, self.vote_pub)

    def check_publication(
        self,
        codes_path: Path | str,
        votes_path: Optional[Path | str],
        used_tokens_path: Path | str,
    ) -> CheckReport:
        """The voter's own line-by-line check against the published files.

        The code+vote list only exists after the count, so votes_path may be
        None during the complaint window — vote_matches then reads False and
        only code_present and the complaint artifact are meaningful.
        """
        receipt, vote, spec = self._load_stored()
        code_hex = receipt.verification_code.hex

        codes = set(model.read_published_list(codes_path))
        code_present = code_hex in codes

        vote_matches = False
        for line in model.read_published_list(votes_path) if votes_path is not None else []:
            published_code, timestamp, salt, published_vote = model.parse_code_vote_line(line)
            if published_code != code_hex:
                continue
            recomputed = model.compute_verification_code(published_vote, spec, timestamp, salt)
            vote_matches = (
                recomputed.hex == code_hex and published_vote.to_dict() == vote.to_dict()
            )
            break

        token_ok = self._token_usage_plausible(used_tokens_path)

        complaint_path = None
        if not code_present:
            complaint = {"receipt": receipt.to_dict()}
            complaint_file = self.store / "complaint.json"
            complaint_file.write_text(json.dumps(complaint, sort_keys=True, indent=1), encoding="utf-8")
            complaint_path = str(complaint_file)
        return CheckReport(
            code_present=code_present,
            vote_matches=vote_matches,
            token_usage_time_plausible=token_ok,
            complaint_path=complaint_path,
        )

    def _token_usage_plausible(self, used_tokens_path: Path | str) -> bool:
        try:
            token_text = (self.store / "token.txt").read_text(encoding="utf-8").strip()
            redeemed_at = json.loads(
                (self.store / "redeem-window.json").read_text(encoding="utf-8")
            )["redeemed_at"]
        except FileNotFoundError:
            return False
        digest_hex = model.VoteToken.from_text(token_text).digest.hex
        for line in model.read_published_list(used_tokens_path):
            line_digest, timestamp = model.parse_used_token_line(line)
            if line_digest != digest_hex:
                continue
            delta = abs(model.parse_timestamp(timestamp) - model.parse_timestamp(redeemed_at))
            return delta <= TOKEN_TIME_WINDOW
        return False

    def check_token_unused(self, unused_tokens_path: Path | str) -> bool:
        """An abstainer's check: my token should be on the not-used list."""
        token_text = (self.store / "token.txt").read_text(encoding="utf-8").strip()
        digest_hex = model.VoteToken.from_text(token_text).digest.hex
        return digest_hex in set(model.read_published_list(unused_tokens_path))


# -- command line ------------------------------------------------------------------


def _parse_answers(pairs: list[str]) -> tuple[tuple[str, int], ...]:
    answers = []
    for pair in pairs:
        qid, _, idx = pair.partition("=")
        if not qid or not idx.lstrip("-").isdigit():
            raise SystemExit(f"bad --answer {pair!r}; expected question-id=choice-index")
        answers.append((qid, int(idx)))
    return tuple(answers)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="ballot-voter", description="voter agent")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("login-redeem", help="authenticate and redeem the vote token")
    p.add_argument("--config", required=True)
    p.add_argument("--username", required=True)
    p.add_argument("--password", required=True)
    p.add_argument("--token", required=True)

    p = sub.add_parser("cast", help="cast a vote through the anonymizer")
    p.add_argument("--config", required=True)
    p.add_argument("--answer", action="append", default=[], help="question-id=choice-index")
    p.add_argument("--pin")

    p = sub.add_parser("verify-receipt", help="re-verify the stored receipt offline")
    p.add_argument("--config", required=True)

    p = sub.add_parser("check-publication", help="check the published tally files")
    p.add_argument("--config", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--votes", required=True)
    p.add_argument("--used-tokens", required=True)
    p.add_argument("--unused-tokens")

    args = parser.parse_args(argv)
    config = ClientConfig.load(args.config)
    client = VoterClient(config)
    try:
        if args.command == "login-redeem":
            pin = client.login_redeem(args.username, args.password, args.token)
            if pin is not None:
                print(f"PIN (memorize, it is not stored): {pin}")
            print("authorization stored")
            return 0
        if args.command == "cast":
            vote = model.Vote(ballot_id=config.ballot_id, answers=_parse_answers(args.answer))
            receipt = client.cast(vote, args.pin)
            print(f"verification code: {receipt.verification_code.hex}")
            print(f"receipt stored in {client.store}")
            return 0
        if args.command == "verify-receipt":
            ok, reason = client.verify_stored_receipt()
            print("receipt ok" if ok else f"receipt BAD: {reason}")
            return 0 if ok else 3
        if args.command == "check-publication":
            report = client.check_publication(args.codes, args.votes, args.used_tokens)
            print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
            if args.unused_tokens and not report.code_present:
                print(f"token unused per publication: {client.check_token_unused(args.unused_tokens)}")
            return 0 if report.all_green else 3
    except ProtocolError as exc:
        print(f"protocol error — {exc}", file=sys.stderr)
        return 2
    except VerificationFailure as exc:
        print(f"VERIFICATION FAILURE — {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
