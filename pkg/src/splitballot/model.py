"""Protocol data model: tokens, authorizations, ballots, votes, receipts.

Everything that crosses a trust boundary has one canonical byte encoding,
defined here. Wire objects are UTF-8 JSON with lexicographically sorted
keys and compact separators; binary fields render as lowercase hex.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import secrets
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from . import crypto
from .crypto import Digest, KeyPair, PublicKey

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S.%fZ"
TOKEN_BYTES = 16
PRN_BYTES = 32
CODE_SALT_BYTES = 16
PIN_PATTERN = re.compile(r"^[0-9]{6}$")


def to_wire(obj: dict[str, Any]) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def from_wire(blob: bytes) -> dict[str, Any]:
    parsed = json.loads(blob.decode("utf-8"))
    if not isinstance(parsed, dict):
        raise ValueError("wire object must be a JSON object")
    return parsed


def format_timestamp(moment: datetime) -> str:
    return moment.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


def now_timestamp() -> str:
    return format_timestamp(datetime.now(timezone.utc))


@dataclass(frozen=True)
class VoteToken:
    """One-time login credential handed to a voter out of band."""

    value: bytes
    ballot_id: str = ""

    def __post_init__(self) -> None:
        if len(self.value) != TOKEN_BYTES:
            raise ValueError(f"token must be {TOKEN_BYTES} bytes, got {len(self.value)}")

    @property
    def text(self) -> str:
        """Base32 without padding: 26 characters, safe to read over a phone."""
        return base64.b32encode(self.value).decode("ascii").rstrip("=")

    @classmethod
    def from_text(cls, text: str, ballot_id: str = "") -> "VoteToken":
        padded = text.strip().upper() + "=" * (-len(text.strip()) % 8)
        return cls(value=base64.b32decode(padded), ballot_id=ballot_id)

    @classmethod
    def fresh(cls, ballot_id: str = "") -> "VoteToken":
        return cls(value=crypto.random_string(TOKEN_BYTES * 8), ballot_id=ballot_id)

    @property
    def digest(self) -> Digest:
        return crypto.digest(self.value)


@dataclass(frozen=True)
class VoteAuthorization:
    """Signed permission to cast one vote, carried by a pseudorandom number.

    mode "plain": the issuer signs the canonical bytes (prn, ballot id, PIN,
    issue time) with PKCS#1 v1.5. mode "blind": the signature is a raw RSA
    signature (big-int hex) over SHA-256(prn), produced without the issuer
    ever seeing the prn; there is no PIN and no issue time in this mode.
    """

    prn: bytes
    ballot_id: str
    mode: str
    signature: str  # hex: PKCS#1 bytes (plain) or big-int (blind)
    pin: Optional[str] = None
    issued_at: Optional[str] = None

    def __post_init__(self) -> None:
        if len(self.prn) != PRN_BYTES:
            raise ValueError(f"prn must be {PRN_BYTES} bytes, got {len(self.prn)}")
        if self.mode not in ("plain", "blind"):
            raise ValueError(f"unknown authorization mode {self.mode!r}")
        if self.pin is not None and not PIN_PATTERN.match(self.pin):
            raise ValueError("pin must be exactly six digits")

    def canonical_bytes(self) -> bytes:
        """The bytes a plain-mode issuer signs."""
        return to_wire(
            {
                "ballot_id": self.ballot_id,
                "issued_at": self.issued_at,
                "pin": self.pin,
                "prn": self.prn.hex(),
            }
        )

    @property
    def prn_digest(self) -> Digest:
        return crypto.digest(self.prn)

    def verify(self, issuer: PublicKey) -> bool:
        try:
            if self.mode == "plain":
                return issuer.verify(self.canonical_bytes(), bytes.fromhex(self.signature))
            return crypto.verify_blind_signature(
                crypto.hex_to_int(self.signature), self.prn_digest, issuer
            )
        except ValueError:
            return False

    def to_dict(self) -> dict[str, Any]:
        return {
            "ballot_id": self.ballot_id,
            "issued_at": self.issued_at,
            "mode": self.mode,
            "pin": self.pin,
            "prn": self.prn.hex(),
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VoteAuthorization":
        return cls(
            prn=bytes.fromhex(data["prn"]),
            ballot_id=data["ballot_id"],
            mode=data["mode"],
            signature=data["signature"],
            pin=data.get("pin"),
            issued_at=data.get("issued_at"),
        )


@dataclass(frozen=True)
class Question:
    question_id: str
    prompt: str
    choices: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.choices) < 2:
            raise ValueError(f"question {self.question_id!r} needs at least 2 choices")

    def to_dict(self) -> dict[str, Any]:
        return {"choices": list(self.choices), "prompt": self.prompt, "question_id": self.question_id}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Question":
        return cls(question_id=data["question_id"], prompt=data["prompt"], choices=tuple(data["choices"]))


@dataclass(frozen=True)
class BallotSpec:
    """What is being voted on, and when: ordered questions plus the open window."""

    ballot_id: str
    questions: tuple[Question, ...]
    open_at: str
    close_at: str

    def __post_init__(self) -> None:
        ids = [q.question_id for q in self.questions]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate question ids")
        parse_timestamp(self.open_at)
        parse_timestamp(self.close_at)

    def question(self, question_id: str) -> Question:
        for q in self.questions:
            if q.question_id == question_id:
                return q
        raise KeyError(question_id)

    def is_open(self, at: Optional[datetime] = None) -> bool:
        moment = at or datetime.now(timezone.utc)
        return parse_timestamp(self.open_at) <= moment < parse_timestamp(self.close_at)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ballot_id": self.ballot_id,
            "close_at": self.close_at,
            "open_at": self.open_at,
            "questions": [q.to_dict() for q in self.questions],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BallotSpec":
        return cls(
            ballot_id=data["ballot_id"],
            questions=tuple(Question.from_dict(q) for q in data["questions"]),
            open_at=data["open_at"],
            close_at=data["close_at"],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(to_wire(self.to_dict()))

    @classmethod
    def load(cls, path: Path | str) -> "BallotSpec":
        return cls.from_dict(from_wire(Path(path).read_bytes()))


@dataclass(frozen=True)
class Vote:
    """A filled-in ballot: one (question id, choice index) pair per question."""

    ballot_id: str
    answers: tuple[tuple[str, int], ...]

    def validate(self, spec: BallotSpec) -> None:
        if self.ballot_id != spec.ballot_id:
            raise ValueError(f"vote is for ballot {self.ballot_id!r}, spec is {spec.ballot_id!r}")
        seen = [qid for qid, _ in self.answers]
        expected = [q.question_id for q in spec.questions]
        if sorted(seen) != sorted(expected):
            raise ValueError(f"answered {sorted(seen)}, ballot asks {sorted(expected)}")
        by_id = dict(self.answers)
        for q in spec.questions:
            choice = by_id[q.question_id]
            if not isinstance(choice, int) or isinstance(choice, bool) or not 0 <= choice < len(q.choices):
                raise ValueError(
                    f"question {q.question_id!r}: choice {choice!r} out of range 0..{len(q.choices) - 1}"
                )

    def choice(self, question_id: str) -> int:
        return dict(self.answers)[question_id]

    def to_dict(self) -> dict[str, Any]:
        return {"answers": [[qid, idx] for qid, idx in self.answers], "ballot_id": self.ballot_id}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Vote":
        return cls(
            ballot_id=data["ballot_id"],
            answers=tuple((str(qid), int(idx)) for qid, idx in data["answers"]),
        )


def canonical_encode_vote(vote: Vote, spec: BallotSpec) -> bytes:
    """Canonical vote bytes: ballot id, then `question-id=choice-index` per line.

    Questions appear in BallotSpec order regardless of how the answers were
    listed, so two renditions of the same selections are byte-identical.
    """
    vote.validate(spec)
    by_id = dict(vote.answers)
    lines = [vote.ballot_id]
    for q in spec.questions:
        lines.append(f"{q.question_id}={by_id[q.question_id]}")
    return "\n".join(lines).encode("utf-8")


def compute_verification_code(vote: Vote, spec: BallotSpec, timestamp: str, random_string: bytes) -> Digest:
    """H(canonical vote || LF || timestamp || LF || random string).

    The salt and timestamp make every code unique even for identical votes;
    forging a duplicate receipt that still verifies would take a second
    preimage of this hash.
    """
    if len(random_string) != CODE_SALT_BYTES:
        raise ValueError(f"random string must be {CODE_SALT_BYTES} bytes, got {len(random_string)}")
    parse_timestamp(timestamp)
    preimage = canonical_encode_vote(vote, spec) + b"\n" + timestamp.encode("ascii") + b"\n" + random_string
    return crypto.digest(preimage)


@dataclass(frozen=True)
class VoteReceipt:
    """What the voter takes home: the code, its inputs, and a signature."""

    verification_code: Digest
    timestamp: str
    random_string: bytes
    signature: bytes  # ballot server signature over the code bytes
    signer_key_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "random_string": self.random_string.hex(),
            "signature": self.signature.hex(),
            "signer_key_id": self.signer_key_id,
            "timestamp": self.timestamp,
            "verification_code": self.verification_code.hex,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VoteReceipt":
        return cls(
            verification_code=Digest.from_hex(data["verification_code"]),
            timestamp=data["timestamp"],
            random_string=bytes.fromhex(data["random_string"]),
            signature=bytes.fromhex(data["signature"]),
            signer_key_id=data["signer_key_id"],
        )


def verify_receipt(
    receipt: VoteReceipt, vote: Vote, spec: BallotSpec, signer: PublicKey
) -> tuple[bool, Optional[str]]:
    """Recompute the code from the vote actually cast, then check the signature.

    Returns (ok, reason); reason is "code-mismatch" or "signature-invalid".
    """
    recomputed = compute_verification_code(vote, spec, receipt.timestamp, receipt.random_string)
    if recomputed.value != receipt.verification_code.value:
        return False, "code-mismatch"
    if not signer.verify(receipt.verification_code.value, receipt.signature):
        return False, "signature-invalid"
    return True, None


def sign_receipt(code: Digest, timestamp: str, random_string: bytes, signer: KeyPair) -> VoteReceipt:
    return VoteReceipt(
        verification_code=code,
        timestamp=timestamp,
        random_string=random_string,
        signature=signer.sign(code.value),
        signer_key_id=signer.key_id,
    )


def format_used_token_line(token_digest_hex: str, timestamp: str) -> str:
    """Published used-token entry; the username column stays empty."""
    return f"{token_digest_hex}\t{timestamp}\t"


def parse_used_token_line(line: str) -> tuple[str, str]:
    parts = line.split("\t")
    if len(parts) != 3 or parts[2] != "":
        raise ValueError(f"malformed used-token line: {line!r}")
    return parts[0], parts[1]


def format_code_vote_line(code_hex: str, timestamp: str, random_string: bytes, vote: Vote) -> str:
    return "\t".join(
        [code_hex, timestamp, random_string.hex(), to_wire(vote.to_dict()).decode("utf-8")]
    )


def parse_code_vote_line(line: str) -> tuple[str, str, bytes, Vote]:
    code_hex, timestamp, rs_hex, vote_json = line.split("\t", 3)
    return code_hex, timestamp, bytes.fromhex(rs_hex), Vote.from_dict(json.loads(vote_json))


def write_published_list(path: Path | str, lines: list[str]) -> None:
    """Newline-terminated sorted text file, one entry per line."""
    body = "".join(line + "\n" for line in sorted(lines))
    Path(path).write_text(body, encoding="utf-8")


def read_published_list(path: Path | str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.split("\n") if line]


def fresh_prn() -> bytes:
    return crypto.random_string(PRN_BYTES * 8)


def fresh_code_salt() -> bytes:
    return crypto.random_string(CODE_SALT_BYTES * 8)


def fresh_pin() -> str:
    """Uniform six-digit PIN, leading zeros allowed."""
    return f"{secrets.randbelow(1_000_000):06d}"


def hash_password(password: str, salt: bytes) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, 60_000)
