"""Manager-side offline tooling: provisioning, reconciliation, publication, count.

Provisioning mints every keypair, credential, and single-use token before the
ballot opens. After it closes, the managers work strictly from the exported
sealed archives: open every record, verify every signature, cross-check the
counts (used tokens = issued authorizations = used authorizations = votes),
publish the token and code lists, wait out the complaint window, and only
then decrypt and count. Anything that fails a check lands in an anomaly list
that is published alongside the tally — exclusions are never silent.
"""

from __future__ import annotations

import argparse
import io
import json
import secrets
import sys
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import audit as audit_mod
from . import crypto, model

KEY_ROLES = ("auth-mgr", "auth-srv", "anon-srv", "vote-mgr", "vote-srv", "client-proxy")


class TallyError(Exception):
    """A manager-facing hard failure: wrong key, missing gate, bad input."""


# -- archives ---------------------------------------------------------------------


def read_archive(source: Path | str | bytes) -> dict[str, bytes]:
    """Load {member-name: bytes} from a tar file, raw tar bytes, or a directory."""
    if isinstance(source, bytes):
        with tarfile.open(fileobj=io.BytesIO(source), mode="r") as tar:
            return {m.name: tar.extractfile(m).read() for m in tar.getmembers() if m.isfile()}
    path = Path(source)
    if path.is_dir():
        return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}
    with tarfile.open(path, mode="r") as tar:
        return {m.name: tar.extractfile(m).read() for m in tar.getmembers() if m.isfile()}


def split_auth_export(archive: dict[str, bytes]) -> tuple[dict[str, bytes], dict[str, bytes], list[str], dict[str, bytes]]:
    """An auth-server export carries used/, issued/, valid/ and the audit files."""
    used = {n.split("/", 1)[1]: b for n, b in archive.items() if n.startswith("used/")}
    issued = {n.split("/", 1)[1]: b for n, b in archive.items() if n.startswith("issued/")}
    valid = sorted(n.split("/", 1)[1] for n in archive if n.startswith("valid/"))
    audit_files = {n: b for n, b in archive.items() if n in ("audit.log", "audit.head")}
    return used, issued, valid, audit_files


# -- provisioning -------------------------------------------------------------------


@dataclass
class ProvisionManifest:
    ballot_id: str
    mode: str
    pin_required: bool
    key_inventory: dict[str, str]
    roster: list[dict[str, str]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "ballot_id": self.ballot_id,
            "key_inventory": self.key_inventory,
            "mode": self.mode,
            "pin_required": self.pin_required,
            "roster": self.roster,
        }


def provision(
    roster_size: int,
    spec: model.BallotSpec,
    out_dir: Path | str,
    mode: str = "plain",
    pin_required: bool = True,
    anonymizer_mode: str = "nat",
    batch_size: int = 4,
    max_hold_seconds: float = 0.5,
) -> ProvisionManifest:
    """Mint keys, credentials, and tokens; lay out all three server state dirs."""
    if mode not in ("plain", "blind"):
        raise TallyError(f"unknown mode {mode!r}")
    out = Path(out_dir)
    keys_dir = out / "keys"
    keys_dir.mkdir(parents=True, exist_ok=True)

    keys = {role: crypto.generate_keypair(role) for role in KEY_ROLES}
    for role, pair in keys.items():
        pair.save(keys_dir / f"{role}.pem")
        pair.public.save(keys_dir / f"{role}.pub.pem")

    auth_secrets = {"manager": secrets.token_hex(16), "sysmgr": secrets.token_hex(16)}
    vote_secrets = {
        "manager": secrets.token_hex(16),
        "sysmgr": secrets.token_hex(16),
        "authmgr": secrets.token_hex(16),
        "votemgr": secrets.token_hex(16),
    }
    (out / "secrets.json").write_text(
        json.dumps({"auth": auth_secrets, "vote": vote_secrets}, indent=1, sort_keys=True),
        encoding="utf-8",
    )
    spec.save(out / "ballot.json")

    roster = []
    credentials = {}
    token_digests = []
    for i in range(roster_size):
        username = f"voter-{i + 1:03d}"
        password = secrets.token_urlsafe(9)
        token = model.VoteToken.fresh(spec.ballot_id)
        salt = secrets.token_bytes(16)
        credentials[username] = {
            "salt": salt.hex(),
            "verifier": model.hash_password(password, salt).hex(),
        }
        token_digests.append(token.digest.hex)
        roster.append(
            {
                "username": username,
                "password": password,
                "token": token.text,
                "token_digest": token.digest.hex,
            }
        )
    if len(set(r["token"] for r in roster)) != roster_size:
        raise TallyError("token collision at provisioning; re-run")  # 2^-128 territory

    # authentication server state: digests only, never a raw token
    authsrv = out / "authsrv"
    (authsrv / "keys").mkdir(parents=True, exist_ok=True)
    (authsrv / "tokens" / "valid").mkdir(parents=True, exist_ok=True)
    (authsrv / "keys" / "auth-srv.pem").write_bytes(keys["auth-srv"].private_pem())
    (authsrv / "keys" / "vote-srv.pub.pem").write_bytes(keys["vote-srv"].public.pem())
    (authsrv / "keys" / "auth-mgr.pub.pem").write_bytes(keys["auth-mgr"].public.pem())
    (authsrv / "credentials.json").write_text(json.dumps(credentials, sort_keys=True), encoding="utf-8")
    for digest_hex in token_digests:
        (authsrv / "tokens" / "valid" / digest_hex).touch()
    auth_config = {
        "ballot_id": spec.ballot_id,
        "open_at": spec.open_at,
        "close_at": spec.close_at,
        "mode": mode,
        "pin_required": pin_required and mode == "plain",
        "keys": {
            "server_private": "keys/auth-srv.pem",
            "votesrv_public": "keys/vote-srv.pub.pem",
            "authmgr_public": "keys/auth-mgr.pub.pem",
        },
        "secrets": auth_secrets,
        "adversaries": [],
    }
    (authsrv / "config.json").write_text(json.dumps(auth_config, indent=1, sort_keys=True), encoding="utf-8")

    # ballot server state
    votesrv = out / "votesrv"
    (votesrv / "keys").mkdir(parents=True, exist_ok=True)
    (votesrv / "keys" / "vote-srv.pem").write_bytes(keys["vote-srv"].private_pem())
    (votesrv / "keys" / "auth-srv.pub.pem").write_bytes(keys["auth-srv"].public.pem())
    (votesrv / "keys" / "auth-mgr.pub.pem").write_bytes(keys["auth-mgr"].public.pem())
    (votesrv / "keys" / "vote-mgr.pub.pem").write_bytes(keys["vote-mgr"].public.pem())
    (votesrv / "keys" / "client-proxy.pub.pem").write_bytes(keys["client-proxy"].public.pem())
    spec.save(votesrv / "ballot.json")
    vote_config = {
        "mode": mode,
        "pin_required": pin_required and mode == "plain",
        "keys": {
            "server_private": "keys/vote-srv.pem",
            "authsrv_public": "keys/auth-srv.pub.pem",
            "authmgr_public": "keys/auth-mgr.pub.pem",
            "votemgr_public": "keys/vote-mgr.pub.pem",
            "clientproxy_public": "keys/client-proxy.pub.pem",
        },
        "secrets": vote_secrets,
        "adversaries": [],
    }
    (votesrv / "config.json").write_text(json.dumps(vote_config, indent=1, sort_keys=True), encoding="utf-8")

    # anonymizer state (upstream filled in at launch time)
    anon = out / "anon"
    anon.mkdir(parents=True, exist_ok=True)
    anon_config = {
        "mode": anonymizer_mode,
        "upstream": "127.0.0.1:0",
        "batch_size": batch_size,
        "max_hold_seconds": max_hold_seconds,
        "adversaries": [],
    }
    (anon / "config.json").write_text(json.dumps(anon_config, indent=1, sort_keys=True), encoding="utf-8")

    # per-voter hand-off bundles
    for entry in roster:
        voter_dir = out / "voters" / entry["username"]
        (voter_dir / "store").mkdir(parents=True, exist_ok=True)
        voter_config = {
            "auth_url": "",
            "anon_url": "",
            "mode": mode,
            "ballot_id": spec.ballot_id,
            "pins": {
                "auth_key_id": keys["auth-srv"].key_id,
                "vote_key_id": keys["vote-srv"].key_id,
            },
            "keys": {
                "auth_public": "../../keys/auth-srv.pub.pem",
                "vote_public": "../../keys/vote-srv.pub.pem",
                "client_proxy_private": "../../keys/client-proxy.pem",
            },
            "store_dir": "store",
        }
        (voter_dir / "config.json").write_text(
            json.dumps(voter_config, indent=1, sort_keys=True), encoding="utf-8"
        )
        (voter_dir / "token.txt").write_text(entry["token"] + "\n", encoding="utf-8")
        (voter_dir / "password.txt").write_text(entry["password"] + "\n", encoding="utf-8")

    manifest = ProvisionManifest(
        ballot_id=spec.ballot_id,
        mode=mode,
        pin_required=pin_required and mode == "plain",
        key_inventory={role: keys[role].key_id for role in KEY_ROLES},
        roster=roster,
    )
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
    )
    return manifest


# -- reconciliation ------------------------------------------------------------------


@dataclass
class ReconciliationReport:
    mode: str
    used_tokens: int
    issued_authorizations: Optional[int]
    used_authorizations: int
    votes: int
    consistent: bool
    anomalies: list[str] = field(default_factory=list)
    usage: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "anomalies": self.anomalies,
            "consistent": self.consistent,
            "issued_authorizations": self.issued_authorizations,
            "mode": self.mode,
            "usage": self.usage,
            "used_authorizations": self.used_authorizations,
            "used_tokens": self.used_tokens,
            "votes": self.votes,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ReconciliationReport":
        return cls(
            mode=data["mode"],
            used_tokens=data["used_tokens"],
            issued_authorizations=data["issued_authorizations"],
            used_authorizations=data["used_authorizations"],
            votes=data["votes"],
            consistent=data["consistent"],
            anomalies=list(data["anomalies"]),
            usage=list(data["usage"]),
        )


def _open_record(
    name: str, blob: bytes, recipient: crypto.KeyPair, expected_signer: crypto.PublicKey
) -> tuple[Optional[bytes], Optional[str]]:
    """Open one sealed record. Wrong key → hard error; bad signature → anomaly."""
    try:
        envelope = crypto.SealedEnvelope.from_bytes(blob)
        payload = crypto.open_envelope(envelope, recipient, expected_signer)
        return payload, None
    except crypto.DecryptionFailed as exc:
        raise TallyError(f"cannot decrypt record {name!r} with the manager key: {exc}") from exc
    except crypto.SignatureInvalid as exc:
        return None, f"record {name!r}: {exc}"


def reconcile(
    usage_records: dict[str, bytes],
    issued_records: dict[str, bytes],
    used_authz_records: dict[str, bytes],
    vote_count: int,
    authmgr_key: crypto.KeyPair,
    authsrv_pub: crypto.PublicKey,
    votesrv_pub: crypto.PublicKey,
    mode: str,
    audit_dir: Optional[Path | str] = None,
) -> ReconciliationReport:
    """The four-column cross-check the managers run together after close."""
    anomalies: list[str] = []
    usage: list[dict[str, str]] = []

    for name, blob in sorted(usage_records.items()):
        payload, anomaly = _open_record(name, blob, authmgr_key, authsrv_pub)
        if anomaly:
            anomalies.append(anomaly)
            continue
        record = model.from_wire(payload)
        if f"{record.get('token_digest', '')}.sealed" != name:
            anomalies.append(f"usage record {name!r} does not match its token digest")
        usage.append(
            {
                "token_digest": record.get("token_digest", ""),
                "used_at": record.get("used_at", ""),
                "username": record.get("username", ""),
            }
        )

    issued_prns: set[str] = set()
    for name, blob in sorted(issued_records.items()):
        payload, anomaly = _open_record(name, blob, authmgr_key, authsrv_pub)
        if anomaly:
            anomalies.append(anomaly)
            continue
        try:
            authorization = model.VoteAuthorization.from_dict(model.from_wire(payload))
        except (ValueError, KeyError) as exc:
            anomalies.append(f"issued record {name!r} is malformed: {exc}")
            continue
        if not authorization.verify(authsrv_pub):
            anomalies.append(f"issued record {name!r}: issuer signature does not verify")
        if f"{authorization.prn_digest.hex}.sealed" != name:
            anomalies.append(f"issued record {name!r} does not match its prn digest")
        issued_prns.add(authorization.prn_digest.hex)

    used_prns: set[str] = set()
    for name, blob in sorted(used_authz_records.items()):
        payload, anomaly = _open_record(name, blob, authmgr_key, votesrv_pub)
        if anomaly:
            anomalies.append(anomaly)
            continue
        try:
            authorization = model.VoteAuthorization.from_dict(model.from_wire(payload))
        except (ValueError, KeyError) as exc:
            anomalies.append(f"used-authorization record {name!r} is malformed: {exc}")
            continue
        if not authorization.verify(authsrv_pub):
            anomalies.append(f"used-authorization record {name!r}: issuer signature does not verify")
        if f"{authorization.prn_digest.hex}.sealed" != name:
            anomalies.append(f"used-authorization record {name!r} does not match its prn digest")
        used_prns.add(authorization.prn_digest.hex)

    counts = {
        "used_tokens": len(usage_records),
        "issued": len(issued_records),
        "used_authz": len(used_authz_records),
        "votes": vote_count,
    }
    if mode == "plain":
        equalities = [
            ("used tokens", counts["used_tokens"], "issued authorizations", counts["issued"]),
            ("issued authorizations", counts["issued"], "used authorizations", counts["used_authz"]),
            ("used authorizations", counts["used_authz"], "votes", counts["votes"]),
        ]
        extra = used_prns - issued_prns
        missing = issued_prns - used_prns
        for prn_digest in sorted(extra):
            anomalies.append(f"authorization {prn_digest} was used but never issued")
        for prn_digest in sorted(missing):
            anomalies.append(f"authorization {prn_digest} was issued but never used")
    else:
        equalities = [
            ("used tokens", counts["used_tokens"], "used authorizations", counts["used_authz"]),
            ("used authorizations", counts["used_authz"], "votes", counts["votes"]),
        ]
    consistent = True
    for left_name, left, right_name, right in equalities:
        if left != right:
            consistent = False
            anomalies.append(f"count mismatch: {left_name} = {left} but {right_name} = {right}")

    if audit_dir is not None:
        anomalies.extend(_audit_anomalies(Path(audit_dir), usage_records))

    return ReconciliationReport(
        mode=mode,
        used_tokens=counts["used_tokens"],
        issued_authorizations=counts["issued"] if mode == "plain" else None,
        used_authorizations=counts["used_authz"],
        votes=counts["votes"],
        consistent=consistent,
        anomalies=anomalies,
        usage=sorted(usage, key=lambda u: u["token_digest"]),
    )


def _audit_anomalies(audit_dir: Path, usage_records: dict[str, bytes]) -> list[str]:
    """Verify the audit chain and cross it against the usage records.

    A usage record with no matching redemption entry means somebody wrote
    server state without going through the server — the sealed-server attack.
    """
    anomalies = []
    audited_digests: set[str] = set()
    log_path = audit_dir / "audit.log"
    _, findings = audit_mod.verify_chain(log_path)
    for finding in findings:
        anomalies.append(f"audit chain: {finding.problem} (seq {finding.seq})")
    for entry in audit_mod.read_entries(log_path):
        if entry.get("action") in ("redeem", "blind-redeem") and entry.get("allowed"):
            audited_digests.add(entry.get("detail", {}).get("token_digest", ""))
    record_digests = {name.removesuffix(".sealed") for name in usage_records}
    for digest_hex in sorted(record_digests - audited_digests):
        anomalies.append(f"used token {digest_hex} has no audit trail (record fabricated while sealed?)")
    for digest_hex in sorted(audited_digests - record_digests):
        anomalies.append(f"audit log shows a redemption of {digest_hex} but its record is missing")
    return anomalies


# -- publication ----------------------------------------------------------------------


def publish_tokens(
    report: ReconciliationReport,
    valid_digests: list[str],
    out_dir: Path | str,
    override: Optional[str] = None,
) -> tuple[Path, Path]:
    """Write the used-token (digest + time) and unused-token lists."""
    if not report.consistent and override is None:
        raise TallyError("reconciliation is inconsistent; publication needs an explicit override")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if override is not None:
        (out / "publication-override.txt").write_text(override + "\n", encoding="utf-8")
    used_lines = [model.format_used_token_line(u["token_digest"], u["used_at"]) for u in report.usage]
    used_path = out / "used-tokens.txt"
    model.write_published_list(used_path, used_lines)
    used_digests = {u["token_digest"] for u in report.usage}
    unused_path = out / "unused-tokens.txt"
    model.write_published_list(unused_path, [d for d in valid_digests if d not in used_digests])
    return used_path, unused_path


def publish_codes(votes_archive: dict[str, bytes], out_dir: Path | str) -> Path:
    """Publish the vote file names — the verification codes — undecrypted."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codes = []
    for name in votes_archive:
        code_hex = name.removesuffix(".sealed")
        if len(code_hex) != 64 or any(c not in "0123456789abcdef" for c in code_hex):
            raise TallyError(f"vote filename {name!r} is not a valid digest")
        codes.append(code_hex)
    path = out / "verification-codes.txt"
    model.write_published_list(path, codes)
    (out / ".codes-published").touch()
    return path


# -- counting -------------------------------------------------------------------------


@dataclass
class TallyResult:
    ballot_id: str
    total_votes: int
    excluded: int
    counts: dict[str, list[int]]
    anomalies: list[str]
    artifacts: dict[str, str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "anomalies": self.anomalies,
            "artifacts": self.artifacts,
            "ballot_id": self.ballot_id,
            "counts": self.counts,
            "excluded": self.excluded,
            "total_votes": self.total_votes,
        }


def count_votes(
    votes_archive: dict[str, bytes],
    votemgr_key: crypto.KeyPair,
    votesrv_pub: crypto.PublicKey,
    spec: model.BallotSpec,
    out_dir: Path | str,
    complaint_window_closed: bool = False,
) -> TallyResult:
    """Decrypt, verify, and count — only after codes are up and complaints closed."""
    out = Path(out_dir)
    if not (out / ".codes-published").exists():
        raise TallyError("publish the verification codes before counting")
    if not complaint_window_closed:
        raise TallyError("the complaint window must be closed before votes are decrypted")

    counts: dict[str, list[int]] = {q.question_id: [0] * len(q.choices) for q in spec.questions}
    anomalies: list[str] = []
    code_vote_lines: list[str] = []
    included = 0

    for name, blob in sorted(votes_archive.items()):
        filename_code = name.removesuffix(".sealed")
        try:
            envelope = crypto.SealedEnvelope.from_bytes(blob)
            payload = crypto.open_envelope(envelope, votemgr_key, votesrv_pub)
        except crypto.CryptoError as exc:
            anomalies.append(f"vote {filename_code}: excluded ({exc})")
            continue
        try:
            stored = model.from_wire(payload)
            vote = model.Vote.from_dict(stored["vote"])
            timestamp = stored["timestamp"]
            salt = bytes.fromhex(stored["random_string"])
            claimed_code = stored["verification_code"]
            recomputed = model.compute_verification_code(vote, spec, timestamp, salt)
        except (ValueError, KeyError, TypeError) as exc:
            anomalies.append(f"vote {filename_code}: excluded (malformed: {exc})")
            continue
        if recomputed.hex != claimed_code or recomputed.hex != filename_code:
            anomalies.append(
                f"vote {filename_code}: excluded (verification code does not recompute; "
                f"content gives {recomputed.hex})"
            )
            continue
        for qid, idx in vote.answers:
            counts[qid][idx] += 1
        included += 1
        code_vote_lines.append(model.format_code_vote_line(filename_code, timestamp, salt, vote))

    out.mkdir(parents=True, exist_ok=True)
    code_votes_path = out / "code-votes.txt"
    model.write_published_list(code_votes_path, code_vote_lines)
    anomalies_path = out / "anomalies.txt"
    anomalies_path.write_text("".join(a + "\n" for a in anomalies), encoding="utf-8")

    result = TallyResult(
        ballot_id=spec.ballot_id,
        total_votes=included,
        excluded=len(votes_archive) - included,
        counts=counts,
        anomalies=anomalies,
        artifacts={
            "code_votes": str(code_votes_path),
            "anomalies": str(anomalies_path),
        },
    )
    tally_path = out / "tally.json"
    tally_path.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    result.artifacts["tally"] = str(tally_path)

    from .report import render_tally_figure  # matplotlib stays out of server processes

    figure_path = out / "tally.png"
    render_tally_figure(result, spec, figure_path)
    result.artifacts["figure"] = str(figure_path)
    tally_path.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    return result


def handle_complaint(
    complaint: dict[str, Any], codes_path: Path | str, votesrv_pub: crypto.PublicKey
) -> dict[str, str]:
    """A voter claims her code is missing: signature decides, list decides."""
    try:
        receipt = model.VoteReceipt.from_dict(complaint["receipt"])
    except (ValueError, KeyError, TypeError):
        return {"verdict": "rejected", "reason": "complaint artifact is malformed"}
    if not votesrv_pub.verify(receipt.verification_code.value, receipt.signature):
        return {"verdict": "rejected", "reason": "receipt signature does not verify"}
    if receipt.verification_code.hex in set(model.read_published_list(codes_path)):
        return {"verdict": "rejected", "reason": "verification code is present in the published list"}
    return {
        "verdict": "valid-complaint",
        "reason": "signed receipt for a code missing from the published list",
        "recommendation": "cancel the ballot before any vote is decrypted",
    }


# -- command line -----------------------------------------------------------------------


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="ballot-tally", description="manager-side ballot tooling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("provision", help="mint keys, credentials, and server state")
    p.add_argument("--roster-size", type=int, required=True)
    p.add_argument("--ballot", required=True, help="BallotSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("plain", "blind"), default="plain")
    p.add_argument("--no-pin", action="store_true")
    p.add_argument("--anonymizer", choices=("nat", "mix"), default="nat")
    p.add_argument("--batch-size", type=int, default=4)

    p = sub.add_parser("reconcile", help="cross-check the exported sealed archives")
    p.add_argument("--mode", choices=("plain", "blind"), required=True)
    p.add_argument("--auth-export", required=True, help="tar from the auth server")
    p.add_argument("--used-authz", required=True, help="tar from the ballot server")
    p.add_argument("--votes", required=True, help="tar from the ballot server (counted only)")
    p.add_argument("--authmgr-key", required=True)
    p.add_argument("--authsrv-pub", required=True)
    p.add_argument("--votesrv-pub", required=True)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("publish-tokens", help="publish used/unused token lists")
    p.add_argument("--report", required=True)
    p.add_argument("--auth-export", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--override", help="publish despite inconsistency, recording why")

    p = sub.add_parser("publish-codes", help="publish verification codes without decrypting")
    p.add_argument("--votes", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("count", help="decrypt, verify, count, and render the tally")
    p.add_argument("--votes", required=True)
    p.add_argument("--votemgr-key", required=True)
    p.add_argument("--votesrv-pub", required=True)
    p.add_argument("--ballot", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--complaint-window-closed", action="store_true")

    p = sub.add_parser("complaint", help="judge a voter's missing-code complaint")
    p.add_argument("--artifact", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--votesrv-pub", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except TallyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "provision":
        spec = model.BallotSpec.load(args.ballot)
        manifest = provision(
            args.roster_size,
            spec,
            args.out,
            mode=args.mode,
            pin_required=not args.no_pin,
            anonymizer_mode=args.anonymizer,
            batch_size=args.batch_size,
        )
        print(f"provisioned {len(manifest.roster)} voters for ballot {manifest.ballot_id!r} in {args.out}")
        return 0

    if args.command == "reconcile":
        archive = read_archive(args.auth_export)
        used, issued, _, audit_files = split_auth_export(archive)
        with tempfile.TemporaryDirectory() as tmp:
            for name, blob in audit_files.items():
                (Path(tmp) / name).write_bytes(blob)
            report = reconcile(
                usage_records=used,
                issued_records=issued,
                used_authz_records=read_archive(args.used_authz),
                vote_count=len(read_archive(args.votes)),
                authmgr_key=crypto.KeyPair.load(args.authmgr_key, role="auth-mgr"),
                authsrv_pub=crypto.PublicKey.load(args.authsrv_pub),
                votesrv_pub=crypto.PublicKey.load(args.votesrv_pub),
                mode=args.mode,
                audit_dir=Path(tmp) if audit_files else None,
            )
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
        status = "consistent" if report.consistent else "INCONSISTENT"
        print(f"reconciliation {status}; {len(report.anomalies)} anomalies; report in {args.out}")
        return 0 if report.consistent and not report.anomalies else 1

    if args.command == "publish-tokens":
        report = ReconciliationReport.from_dict(json.loads(Path(args.report).read_text(encoding="utf-8")))
        _, _, valid, _ = split_auth_export(read_archive(args.auth_export))
        used_path, unused_path = publish_tokens(report, valid, args.out, override=args.override)
        print(f"published {used_path} and {unused_path}")
        return 0

    if args.command == "publish-codes":
        path = publish_codes(read_archive(args.votes), args.out)
        print(f"published {path}")
        return 0

    if args.command == "count":
        spec = model.BallotSpec.load(args.ballot)
        result = count_votes(
            read_archive(args.votes),
            crypto.KeyPair.load(args.votemgr_key, role="vote-mgr"),
            crypto.PublicKey.load(args.votesrv_pub),
            spec,
            args.out,
            complaint_window_closed=args.complaint_window_closed,
        )
        print(json.dumps(result.to_dict(), indent=1, sort_keys=True))
        return 0

    if args.command == "complaint":
        complaint = json.loads(Path(args.artifact).read_text(encoding="utf-8"))
        verdict = handle_complaint(complaint, args.codes, crypto.PublicKey.load(args.votesrv_pub))
        print(json.dumps(verdict, indent=1, sort_keys=True))
        return 0 if verdict["verdict"] == "valid-complaint" else 1
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
