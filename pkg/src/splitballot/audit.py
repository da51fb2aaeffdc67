"""Tamper-evident audit log: a hash chain over append-only JSON lines.

Each entry commits to its predecessor, and a separate head file anchors
the latest hash, so both in-place edits and truncation of the tail are
detectable offline. Servers write every privileged action here, including
the ones they refuse.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .model import now_timestamp, to_wire

GENESIS = "0" * 64


@dataclass
class AuditFinding:
    seq: Optional[int]
    problem: str


class AuditLog:
    """Append-only hash-chained log with a head anchor file."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.head_path = self.path.with_suffix(".head")
        self._lock = threading.Lock()
        self._seq, self._prev = self._recover()

    def _recover(self) -> tuple[int, str]:
        if not self.path.exists():
            return 0, GENESIS
        last = None
        with self.path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    last = json.loads(line)
        if last is None:
            return 0, GENESIS
        return last["seq"] + 1, last["entry_hash"]

    def append(self, actor: str, action: str, detail: dict[str, Any], allowed: bool = True) -> dict[str, Any]:
        import hashlib

        with self._lock:
            entry = {
                "action": action,
                "actor": actor,
                "allowed": allowed,
                "detail": detail,
                "prev": self._prev,
                "seq": self._seq,
                "timestamp": now_timestamp(),
            }
            entry_hash = hashlib.sha256(to_wire(entry)).hexdigest()
            entry["entry_hash"] = entry_hash
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self.head_path.write_text(f"{self._seq} {entry_hash}\n", encoding="utf-8")
            self._seq += 1
            self._prev = entry_hash
            return entry


def read_entries(path: Path | str) -> list[dict[str, Any]]:
    entries = []
    log_path = Path(path)
    if not log_path.exists():
        return entries
    with log_path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    return entries


def verify_chain(path: Path | str) -> tuple[bool, list[AuditFinding]]:
    """Recompute the chain and check it against the head anchor.

    Findings cover broken links, recomputed-hash mismatches, sequence gaps,
    and a head file pointing past (truncation) or away from the actual tail.
    """
    import hashlib

    log_path = Path(path)
    head_path = log_path.with_suffix(".head")
    findings: list[AuditFinding] = []
    entries = read_entries(log_path)

    prev = GENESIS
    for i, entry in enumerate(entries):
        claimed = entry.get("entry_hash", "")
        body = {k: v for k, v in entry.items() if k != "entry_hash"}
        recomputed = hashlib.sha256(to_wire(body)).hexdigest()
        if recomputed != claimed:
            findings.append(AuditFinding(entry.get("seq"), "entry hash mismatch (content altered)"))
        if entry.get("prev") != prev:
            findings.append(AuditFinding(entry.get("seq"), "chain link broken (prev does not match)"))
        if entry.get("seq") != i:
            findings.append(AuditFinding(entry.get("seq"), f"sequence gap (expected {i})"))
        prev = claimed

    if head_path.exists():
        head_text = head_path.read_text(encoding="utf-8").strip()
        try:
            head_seq_text, head_hash = head_text.split(" ")
            head_seq = int(head_seq_text)
        except ValueError:
            findings.append(AuditFinding(None, "head anchor unreadable"))
        else:
            if not entries:
                findings.append(AuditFinding(None, "head anchor present but log is empty (truncated)"))
            else:
                tail = entries[-1]
                if head_seq > tail.get("seq", -1):
                    findings.append(AuditFinding(tail.get("seq"), "log shorter than head anchor (truncated)"))
                elif head_seq == tail.get("seq") and head_hash != tail.get("entry_hash"):
                    findings.append(AuditFinding(tail.get("seq"), "head anchor does not match tail entry"))
    elif entries:
        findings.append(AuditFinding(None, "head anchor missing for a non-empty log"))

    return not findings, findings


def sealed_access_entries(path: Path | str) -> list[dict[str, Any]]:
    """Entries recording state access while the store was sealed."""
    flagged = []
    sealed = False
    for entry in read_entries(path):
        action = entry.get("action", "")
        if action == "seal":
            sealed = True
        elif action == "unseal":
            sealed = False
        elif sealed and entry.get("detail", {}).get("while_sealed"):
            flagged.append(entry)
    return flagged
