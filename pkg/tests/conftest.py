"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from splitballot import crypto, model, tally


@pytest.fixture(scope="session")
def signer() -> crypto.KeyPair:
    return crypto.generate_keypair("test-signer")


@pytest.fixture(scope="session")
def other_key() -> crypto.KeyPair:
    return crypto.generate_keypair("test-other")


def build_spec(ballot_id: str = "unit-ballot", hours: float = 2.0) -> model.BallotSpec:
    now = datetime.now(timezone.utc)
    return model.BallotSpec(
        ballot_id=ballot_id,
        questions=(
            model.Question("q1", "Adopt the proposal?", ("yes", "no", "abstain")),
            model.Question("q2", "Renew the board's mandate?", ("yes", "no")),
        ),
        open_at=model.format_timestamp(now - timedelta(hours=1)),
        close_at=model.format_timestamp(now + timedelta(hours=hours)),
    )


def provision_ballot(out_dir: Path, n: int = 3, **kwargs) -> tuple[tally.ProvisionManifest, model.BallotSpec]:
    spec = build_spec(kwargs.pop("ballot_id", "unit-ballot"))
    manifest = tally.provision(n, spec, out_dir, **kwargs)
    return manifest, spec


def scan_tree(root: Path, needles: list[bytes]) -> list[tuple[str, bytes]]:
    """Every (file, needle) pair where the needle's bytes appear in the file."""
    hits = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        blob = path.read_bytes()
        for needle in needles:
            if needle in blob:
                hits.append((str(path.relative_to(root)), needle))
    return hits


def make_plain_authorization(
    work: Path, ballot_id: str, pin: str | None = "123456"
) -> tuple[model.VoteAuthorization, str]:
    """A valid sealed authorization, built the way the issuing server builds it."""
    auth_key = crypto.KeyPair.load(work / "keys" / "auth-srv.pem", role="auth-srv")
    vote_pub = crypto.PublicKey.load(work / "keys" / "vote-srv.pub.pem")
    prn = model.fresh_prn()
    issued_at = model.now_timestamp()
    unsigned = {"ballot_id": ballot_id, "issued_at": issued_at, "pin": pin, "prn": prn.hex()}
    authorization = model.VoteAuthorization(
        prn=prn,
        ballot_id=ballot_id,
        mode="plain",
        signature=auth_key.sign(model.to_wire(unsigned)).hex(),
        pin=pin,
        issued_at=issued_at,
    )
    sealed = crypto.seal(model.to_wire(authorization.to_dict()), auth_key, vote_pub)
    return authorization, sealed.to_bytes().hex()
