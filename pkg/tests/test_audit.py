"""Hash-chained audit log: every tamper mode must surface in verify_chain."""

from __future__ import annotations

import json
from pathlib import Path

from splitballot import audit


def _write_log(path: Path, n: int = 5) -> audit.AuditLog:
    log = audit.AuditLog(path)
    for i in range(n):
        log.append("manager", "redeem", {"token_digest": f"{i:064x}"})
    return log


def _rewrite(path: Path, entries: list[dict]) -> None:
    path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))


def test_clean_chain_verifies(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    ok, findings = audit.verify_chain(path)
    assert ok and findings == []


def test_append_resumes_after_reopen(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path, n=3)
    reopened = audit.AuditLog(path)
    reopened.append("sysmgr", "export", {})
    ok, _ = audit.verify_chain(path)
    assert ok
    entries = audit.read_entries(path)
    assert [e["seq"] for e in entries] == [0, 1, 2, 3]
    assert entries[3]["prev"] == entries[2]["entry_hash"]


def test_altered_entry_content_is_detected(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    entries = audit.read_entries(path)
    entries[2]["detail"]["token_digest"] = "f" * 64  # rewrite history
    _rewrite(path, entries)
    ok, findings = audit.verify_chain(path)
    assert not ok
    assert any("content altered" in f.problem and f.seq == 2 for f in findings)


def test_rehashed_entry_breaks_the_link(tmp_path):
    # An attacker who also recomputes the entry hash still breaks the chain,
    # because the next entry committed to the old hash.
    import hashlib

    from splitballot.model import to_wire

    path = tmp_path / "audit.log"
    _write_log(path)
    entries = audit.read_entries(path)
    victim = entries[1]
    victim["actor"] = "nobody"
    body = {k: v for k, v in victim.items() if k != "entry_hash"}
    victim["entry_hash"] = hashlib.sha256(to_wire(body)).hexdigest()
    _rewrite(path, entries)
    ok, findings = audit.verify_chain(path)
    assert not ok
    assert any("chain link broken" in f.problem and f.seq == 2 for f in findings)


def test_truncation_is_caught_by_the_head_anchor(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    entries = audit.read_entries(path)
    _rewrite(path, entries[:3])  # drop the last two entries
    ok, findings = audit.verify_chain(path)
    assert not ok
    assert any("truncated" in f.problem for f in findings)


def test_fully_emptied_log_is_caught(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    path.write_text("")
    ok, findings = audit.verify_chain(path)
    assert not ok
    assert any("truncated" in f.problem for f in findings)


def test_missing_head_anchor_is_caught(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    path.with_suffix(".head").unlink()
    ok, findings = audit.verify_chain(path)
    assert not ok
    assert any("head anchor missing" in f.problem for f in findings)


def test_garbled_head_anchor_is_caught(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    path.with_suffix(".head").write_text("whatever\n")
    ok, findings = audit.verify_chain(path)
    assert not ok
    assert any("unreadable" in f.problem for f in findings)


def test_removed_middle_entry_is_caught(tmp_path):
    path = tmp_path / "audit.log"
    _write_log(path)
    entries = audit.read_entries(path)
    del entries[2]
    _rewrite(path, entries)
    ok, findings = audit.verify_chain(path)
    assert not ok
    problems = " / ".join(f.problem for f in findings)
    assert "chain link broken" in problems
    assert "sequence gap" in problems


def test_empty_or_missing_log_is_fine_without_head(tmp_path):
    ok, findings = audit.verify_chain(tmp_path / "never-written.log")
    assert ok and findings == []


def test_sealed_access_entries(tmp_path):
    path = tmp_path / "audit.log"
    log = audit.AuditLog(path)
    log.append("manager", "redeem", {})
    log.append("manager", "seal", {})
    log.append("sysmgr", "export", {"while_sealed": True}, allowed=False)
    log.append("manager", "unseal", {})
    log.append("sysmgr", "export", {})
    flagged = audit.sealed_access_entries(path)
    assert len(flagged) == 1
    assert flagged[0]["action"] == "export"
    assert flagged[0]["allowed"] is False
