"""Ballot server: receipts, single-use authorizations, PIN lockout, anonymous state."""

from __future__ import annotations

import io
import tarfile
from concurrent.futures import ThreadPoolExecutor

import pytest

from splitballot import crypto, model
from splitballot.httpd import ApiError
from splitballot.voteserver import ReceiptClock, VoteServer
from conftest import make_plain_authorization, provision_ballot, scan_tree


@pytest.fixture
def vote_setup(tmp_path):
    manifest, spec = provision_ballot(tmp_path, n=3)
    return manifest, spec, VoteServer(tmp_path / "votesrv"), tmp_path


def _cast_body(spec, sealed_hex, pin, answers=(("q1", 0), ("q2", 1))):
    vote = model.Vote(spec.ballot_id, tuple(answers))
    body = {"vote": vote.to_dict(), "sealed_authorization": sealed_hex}
    if pin is not None:
        body["pin"] = pin
    return vote, body


def test_cast_round_trip(vote_setup):
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
    vote, body = _cast_body(spec, sealed_hex, authorization.pin)

    receipt = model.VoteReceipt.from_dict(server.cast(body))
    votesrv_pub = crypto.PublicKey.load(work / "keys" / "vote-srv.pub.pem")
    ok, reason = model.verify_receipt(receipt, vote, spec, votesrv_pub)
    assert (ok, reason) == (True, None)
    assert receipt.signer_key_id == votesrv_pub.key_id

    code_hex = receipt.verification_code.hex
    vote_path = work / "votesrv" / "votes" / f"{code_hex}.sealed"
    assert vote_path.exists()

    # the stored vote decrypts only for the counting manager, and matches
    votemgr = crypto.KeyPair.load(work / "keys" / "vote-mgr.pem", role="vote-mgr")
    stored = model.from_wire(
        crypto.open_envelope(
            crypto.SealedEnvelope.from_bytes(vote_path.read_bytes()), votemgr, votesrv_pub
        )
    )
    assert model.Vote.from_dict(stored["vote"]) == vote
    assert stored["verification_code"] == code_hex

    # the used-authorization record round-trips for the issuing manager
    used_path = work / "votesrv" / "authz" / "used" / f"{authorization.prn_digest.hex}.sealed"
    authmgr = crypto.KeyPair.load(work / "keys" / "auth-mgr.pem", role="auth-mgr")
    recorded = model.VoteAuthorization.from_dict(
        model.from_wire(
            crypto.open_envelope(
                crypto.SealedEnvelope.from_bytes(used_path.read_bytes()), authmgr, votesrv_pub
            )
        )
    )
    assert recorded.prn == authorization.prn


def test_authorization_reuse_rejected(vote_setup):
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
    _, body = _cast_body(spec, sealed_hex, authorization.pin)
    server.cast(body)
    _, again = _cast_body(spec, sealed_hex, authorization.pin, answers=(("q1", 1), ("q2", 0)))
    with pytest.raises(ApiError) as err:
        server.cast(again)
    assert err.value.code == "authorization-already-used"
    assert err.value.status == 409


def test_pin_strikes_then_lockout(vote_setup):
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id, pin="123456")
    for _ in range(3):
        _, body = _cast_body(spec, sealed_hex, "000000")
        with pytest.raises(ApiError) as err:
            server.cast(body)
        assert err.value.code == "pin-mismatch"
    # even the right PIN is refused once the authorization is locked
    _, body = _cast_body(spec, sealed_hex, "123456")
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "authorization-locked"
    assert err.value.status == 423
    assert list((work / "votesrv" / "votes").iterdir()) == []


def test_correct_pin_resets_the_strike_counter(vote_setup):
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id, pin="123456")
    for _ in range(2):
        _, body = _cast_body(spec, sealed_hex, "999999")
        with pytest.raises(ApiError):
            server.cast(body)
    _, body = _cast_body(spec, sealed_hex, "123456")
    receipt = server.cast(body)
    assert "verification_code" in receipt


def test_missing_pin_counts_as_mismatch(vote_setup):
    _, spec, server, work = vote_setup
    _, sealed_hex = make_plain_authorization(work, spec.ballot_id)
    _, body = _cast_body(spec, sealed_hex, None)
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "pin-mismatch"


def test_concurrent_casts_single_receipt(vote_setup):
    """32 racing casts under one authorization must store exactly one vote."""
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
    _, body = _cast_body(spec, sealed_hex, authorization.pin)

    def attempt(_):
        try:
            return ("ok", server.cast(dict(body)))
        except ApiError as exc:
            return ("err", exc.code)

    with ThreadPoolExecutor(max_workers=32) as pool:
        outcomes = list(pool.map(attempt, range(32)))

    wins = [o for o in outcomes if o[0] == "ok"]
    losses = [o for o in outcomes if o[0] == "err"]
    assert len(wins) == 1
    assert len(losses) == 31 and all(code == "authorization-already-used" for _, code in losses)
    assert len(list((work / "votesrv" / "votes").iterdir())) == 1
    assert len(list((work / "votesrv" / "authz" / "used").iterdir())) == 1


def test_identical_votes_get_distinct_codes(vote_setup):
    _, spec, server, work = vote_setup
    codes = set()
    for _ in range(8):
        authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
        _, body = _cast_body(spec, sealed_hex, authorization.pin, answers=(("q1", 0), ("q2", 0)))
        codes.add(server.cast(body)["verification_code"])
    assert len(codes) == 8
    assert len(list((work / "votesrv" / "votes").iterdir())) == 8


def test_receipt_clock_never_repeats():
    clock = ReceiptClock()
    stamps = [clock.next_timestamp() for _ in range(2000)]
    assert len(set(stamps)) == 2000
    assert stamps == sorted(stamps)


def test_forged_issuer_rejected(vote_setup):
    _, spec, server, work = vote_setup
    vote_pub = crypto.PublicKey.load(work / "keys" / "vote-srv.pub.pem")
    impostor = crypto.generate_keypair("impostor")
    prn = model.fresh_prn()
    issued_at = model.now_timestamp()
    unsigned = {"ballot_id": spec.ballot_id, "issued_at": issued_at, "pin": "123456", "prn": prn.hex()}
    forged = model.VoteAuthorization(
        prn=prn, ballot_id=spec.ballot_id, mode="plain",
        signature=impostor.sign(model.to_wire(unsigned)).hex(), pin="123456", issued_at=issued_at,
    )
    sealed_hex = crypto.seal(model.to_wire(forged.to_dict()), impostor, vote_pub).to_bytes().hex()
    _, body = _cast_body(spec, sealed_hex, "123456")
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "authorization-invalid"


def test_wrong_ballot_authorization_rejected(vote_setup):
    _, spec, server, work = vote_setup
    _, sealed_hex = make_plain_authorization(work, "some-other-ballot")
    _, body = _cast_body(spec, sealed_hex, "123456")
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "authorization-invalid"


def test_garbage_authorization_rejected(vote_setup):
    _, spec, server, _ = vote_setup
    for blob in ("zz-not-hex", "deadbeef" * 4):
        _, body = _cast_body(spec, blob, "123456")
        with pytest.raises(ApiError) as err:
            server.cast(body)
        assert err.value.code == "authorization-invalid"


def test_malformed_vote_rejected(vote_setup):
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
    body = {"vote": {"ballot_id": spec.ballot_id, "answers": [["q1", 0]]}, "sealed_authorization": sealed_hex, "pin": authorization.pin}
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "vote-invalid"
    body = {"vote": 5, "sealed_authorization": sealed_hex, "pin": authorization.pin}
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "vote-invalid"


def test_blind_mode_accepts_proxy_sealed_authorizations(tmp_path):
    manifest, spec = provision_ballot(tmp_path, n=2, mode="blind")
    server = VoteServer(tmp_path / "votesrv")
    auth_key = crypto.KeyPair.load(tmp_path / "keys" / "auth-srv.pem", role="auth-srv")
    proxy_key = crypto.KeyPair.load(tmp_path / "keys" / "client-proxy.pem", role="client-proxy")
    vote_pub = crypto.PublicKey.load(tmp_path / "keys" / "vote-srv.pub.pem")

    prn = model.fresh_prn()
    ctx = crypto.blind(crypto.digest(prn), auth_key.public)
    signature = crypto.unblind(crypto.blind_sign(ctx.blinded_message, auth_key), ctx)
    authorization = model.VoteAuthorization(
        prn=prn, ballot_id=spec.ballot_id, mode="blind", signature=crypto.int_to_hex(signature)
    )
    sealed_hex = crypto.seal(model.to_wire(authorization.to_dict()), proxy_key, vote_pub).to_bytes().hex()
    vote, body = _cast_body(spec, sealed_hex, None)
    receipt = model.VoteReceipt.from_dict(server.cast(body))
    ok, reason = model.verify_receipt(receipt, vote, spec, vote_pub)
    assert (ok, reason) == (True, None)

    # a plain-mode authorization cannot sneak into a blind-mode ballot
    _, plain_sealed = make_plain_authorization(tmp_path, spec.ballot_id)
    _, body = _cast_body(spec, plain_sealed, "123456")
    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "authorization-invalid"


def test_exports_wait_for_close(vote_setup):
    _, spec, server, work = vote_setup
    authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
    _, body = _cast_body(spec, sealed_hex, authorization.pin)
    code_hex = server.cast(body)["verification_code"]

    with pytest.raises(ApiError) as err:
        server._require_closed()
    assert err.value.code == "ballot-still-open"

    (work / "votesrv" / "CLOSED").touch()
    assert server.closed
    server._require_closed()
    with tarfile.open(fileobj=io.BytesIO(server.export_tar("votes"))) as tar:
        assert {m.name for m in tar.getmembers()} == {f"{code_hex}.sealed"}
    with tarfile.open(fileobj=io.BytesIO(server.export_tar("authz/used"))) as tar:
        assert {m.name for m in tar.getmembers()} == {f"{authorization.prn_digest.hex}.sealed"}

    with pytest.raises(ApiError) as err:
        server.cast(body)
    assert err.value.code == "ballot-closed"


def test_no_identities_at_rest(vote_setup):
    manifest, spec, server, work = vote_setup
    for _ in range(3):
        authorization, sealed_hex = make_plain_authorization(work, spec.ballot_id)
        _, body = _cast_body(spec, sealed_hex, authorization.pin)
        server.cast(body)
    needles = []
    for voter in manifest.roster:
        needles.append(voter["username"].encode("ascii"))
        needles.append(voter["password"].encode("ascii"))
        needles.append(voter["token"].encode("ascii"))
        needles.append(model.VoteToken.from_text(voter["token"]).value)
    hits = scan_tree(work / "votesrv", needles)
    assert hits == [], f"voter identity material found on the ballot server: {hits}"
