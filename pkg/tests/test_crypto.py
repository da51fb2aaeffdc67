"""Primitives: digests, signatures, sealed envelopes, blind signatures."""

from __future__ import annotations

import hashlib
import secrets

import pytest

from splitballot import crypto

# sha256 of the empty string, checked against the sha256sum command line tool.
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_empty_frozen_vector():
    assert crypto.digest(b"").hex == EMPTY_SHA256


def test_digest_rejects_wrong_length():
    with pytest.raises(ValueError):
        crypto.Digest(b"\x00" * 31)
    round_tripped = crypto.Digest.from_hex(EMPTY_SHA256)
    assert round_tripped.value == bytes.fromhex(EMPTY_SHA256)


def test_random_string_length_and_entropy():
    draws = {crypto.random_string(128) for _ in range(1000)}
    assert len(draws) == 1000
    assert all(len(d) == 16 for d in draws)


@pytest.mark.parametrize("bits", [0, 32, 63, 70])
def test_random_string_rejects_weak_or_ragged_sizes(bits):
    with pytest.raises(ValueError):
        crypto.random_string(bits)


def test_int_hex_round_trip():
    for value in (0, 1, 255, 256, 2**2047 + 12345):
        assert crypto.hex_to_int(crypto.int_to_hex(value)) == value
    with pytest.raises(ValueError):
        crypto.int_to_hex(-1)


def test_sign_verify_round_trip(signer, other_key):
    message = b"the polls close at nine"
    signature = signer.sign(message)
    assert signer.public.verify(message, signature)
    assert not signer.public.verify(message + b"!", signature)
    assert not other_key.public.verify(message, signature)


def test_signature_single_bit_flip_rejected(signer):
    message = b"flip one bit"
    signature = bytearray(signer.sign(message))
    signature[7] ^= 0x01
    assert not signer.public.verify(message, bytes(signature))


def test_key_id_matches_der_digest(signer):
    assert signer.public.key_id == hashlib.sha256(signer.public.der()).hexdigest()[:8]
    assert len(signer.public.key_id) == 8


def test_keypair_save_load_round_trip(tmp_path, signer):
    path = tmp_path / "pair.pem"
    signer.save(path)
    loaded = crypto.KeyPair.load(path, role="reloaded")
    assert loaded.public == signer.public
    assert loaded.public.key_id == signer.public.key_id


def test_generate_keypair_rejects_short_modulus():
    with pytest.raises(ValueError):
        crypto.generate_keypair("weak", bits=1024)


# --- sealed envelopes ---------------------------------------------------


def test_seal_open_round_trip(signer, other_key):
    payload = b'{"answers": {"q1": 0}}'
    envelope = crypto.seal(payload, signer, other_key.public)
    assert envelope.recipient_key_id == other_key.public.key_id
    opened = crypto.open_envelope(envelope, other_key, expected_signer=signer.public)
    assert opened == payload


def test_envelope_wire_round_trip(signer, other_key):
    envelope = crypto.seal(b"payload", signer, other_key.public)
    again = crypto.SealedEnvelope.from_bytes(envelope.to_bytes())
    assert crypto.open_envelope(again, other_key) == b"payload"


def test_open_with_wrong_recipient_key(signer, other_key):
    envelope = crypto.seal(b"secret", signer, other_key.public)
    with pytest.raises(crypto.DecryptionFailed):
        crypto.open_envelope(envelope, signer)


def test_open_with_wrong_expected_signer(signer, other_key):
    envelope = crypto.seal(b"secret", signer, other_key.public)
    with pytest.raises(crypto.SignatureInvalid):
        crypto.open_envelope(envelope, other_key, expected_signer=other_key.public)


def test_tampered_ciphertext_fails_closed(signer, other_key):
    envelope = crypto.seal(b"secret", signer, other_key.public)
    corrupt = bytearray(envelope.ciphertext)
    corrupt[-1] ^= 0xFF
    tampered = crypto.SealedEnvelope(
        recipient_key_id=envelope.recipient_key_id,
        sender_key_id=envelope.sender_key_id,
        encapsulated_key=envelope.encapsulated_key,
        ciphertext=bytes(corrupt),
    )
    with pytest.raises(crypto.DecryptionFailed):
        crypto.open_envelope(tampered, other_key)


def test_envelope_from_malformed_bytes():
    with pytest.raises(crypto.DecryptionFailed):
        crypto.SealedEnvelope.from_bytes(b"not an envelope")
    with pytest.raises(crypto.DecryptionFailed):
        crypto.SealedEnvelope.from_bytes(b'{"ciphertext": "zz"}')


# --- blind signatures ----------------------------------------------------


def test_blind_signature_round_trip_many(signer):
    for _ in range(100):
        message = crypto.digest(secrets.token_bytes(32))
        ctx = crypto.blind(message, signer.public)
        signature = crypto.unblind(crypto.blind_sign(ctx.blinded_message, signer), ctx)
        assert crypto.verify_blind_signature(signature, message, signer.public)


def test_blind_with_unit_factor_is_identity(signer):
    message = crypto.digest(b"fixed blinding factor")
    ctx = crypto.blind(message, signer.public, _fixed_r=1)
    assert ctx.blinded_message == ctx.message_int
    signature = crypto.unblind(crypto.blind_sign(ctx.blinded_message, signer), ctx)
    assert crypto.verify_blind_signature(signature, message, signer.public)


def test_blind_rejects_factor_sharing_the_modulus(signer):
    message = crypto.digest(b"bad r")
    with pytest.raises(ValueError):
        crypto.blind(message, signer.public, _fixed_r=signer.public.numbers.n)


def test_unblind_with_wrong_context_raises(signer):
    a, b = crypto.digest(b"message a"), crypto.digest(b"message b")
    ctx_a = crypto.blind(a, signer.public)
    ctx_b = crypto.blind(b, signer.public)
    signed_a = crypto.blind_sign(ctx_a.blinded_message, signer)
    with pytest.raises(crypto.SignatureInvalid):
        crypto.unblind(signed_a, ctx_b)


def test_blind_verify_rejects_wrong_message_or_signer(signer, other_key):
    message = crypto.digest(b"the real message")
    ctx = crypto.blind(message, signer.public)
    signature = crypto.unblind(crypto.blind_sign(ctx.blinded_message, signer), ctx)
    assert not crypto.verify_blind_signature(signature, crypto.digest(b"another"), signer.public)
    assert not crypto.verify_blind_signature(signature, message, other_key.public)


def _byte_histogram(samples: list[bytes]) -> list[float]:
    counts = [0] * 256
    total = 0
    for sample in samples:
        for b in sample:
            counts[b] += 1
            total += 1
    return [c / total for c in counts]


def _total_variation(p: list[float], q: list[float]) -> float:
    return 0.5 * sum(abs(a - b) for a, b in zip(p, q))


def test_blinded_values_leak_nothing_about_the_message(signer):
    """What the signer sees must look the same whether or not the message repeats.

    200 blindings of one fixed digest against 200 blindings of fresh digests:
    the two byte distributions should be statistically indistinguishable, and
    the repeated-message transcripts must never repeat themselves.
    """
    width = (signer.public.numbers.n.bit_length() + 7) // 8
    fixed = crypto.digest(b"always the same vote")

    same = [
        crypto.blind(fixed, signer.public).blinded_message.to_bytes(width, "big")
        for _ in range(200)
    ]
    fresh = [
        crypto.blind(crypto.digest(secrets.token_bytes(32)), signer.public).blinded_message.to_bytes(width, "big")
        for _ in range(200)
    ]

    assert len(set(same)) == len(same), "blinding the same message twice produced a repeat"
    distance = _total_variation(_byte_histogram(same), _byte_histogram(fresh))
    # ~0.04 expected for two samples of this size from the same distribution.
    assert distance < 0.12, f"blinded transcripts separable by message: tv={distance:.3f}"
