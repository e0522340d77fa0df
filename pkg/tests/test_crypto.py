import json
import pathlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshmsg import crypto
from meshmsg.crypto import (BODY_SIZE, KEM_SIZE, MAX_TEXT, NONCE_SIZE, PACKET_SIZE, PK_SIZE,
                            PLAINTEXT_SIZE, SIG_SIZE, TAG_SIZE, Packet)

VECTORS = json.loads((pathlib.Path(__file__).parent / "fixtures" / "crypto_vectors.json").read_text())

ALICE = crypto.keygen(1)
BOB = crypto.keygen(2)
CAROL = crypto.keygen(3)

plaintexts = st.binary(min_size=PLAINTEXT_SIZE, max_size=PLAINTEXT_SIZE)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- keys ----------------------------------------------------------------

def test_keygen_is_deterministic_per_seed():
    assert crypto.keygen(42) == crypto.keygen(42)
    assert crypto.keygen(b"abc").pk == crypto.keygen(b"abc").pk


def test_distinct_seeds_give_distinct_keys():
    assert crypto.keygen(1).pk != crypto.keygen(2).pk


def test_thousand_seeds_thousand_public_keys():
    pks = {crypto.keygen(s).pk for s in range(1000)}
    assert len(pks) == 1000


def test_public_key_is_compressed_point_derived_from_secret():
    kp = crypto.keygen(7)
    assert len(kp.pk) == PK_SIZE and kp.pk[0] in (2, 3)
    assert crypto.KeyPair.from_secret(kp.sk).pk == kp.pk


def test_os_entropy_keys_differ():
    assert crypto.keygen().pk != crypto.keygen().pk


# -- layout --------------------------------------------------------------

def test_byte_budget_gives_ell():
    # sum of the chosen primitive sizes, recomputed independently
    ell = 255 - 33 - 12 - 16 - 33 - 64
    assert ell == PLAINTEXT_SIZE == 97
    assert ell >= 64
    assert KEM_SIZE + NONCE_SIZE + BODY_SIZE + TAG_SIZE == PACKET_SIZE
    assert BODY_SIZE == PK_SIZE + SIG_SIZE + PLAINTEXT_SIZE
    assert VECTORS["layout"] == {"kem_ct": KEM_SIZE, "nonce": NONCE_SIZE,
                                 "body_ct": BODY_SIZE, "tag": TAG_SIZE}


def test_packet_fields_round_trip():
    pkt = crypto.signcrypt(ALICE, BOB.pk, crypto.pad(b"x"), rng())
    view = Packet.parse(pkt)
    assert [len(f) for f in view] == [KEM_SIZE, NONCE_SIZE, BODY_SIZE, TAG_SIZE]
    assert view.to_bytes() == pkt
    with pytest.raises(ValueError):
        Packet.parse(pkt[:-1])


# -- padding -------------------------------------------------------------

@given(st.binary(max_size=MAX_TEXT))
def test_pad_round_trip(text):
    block = crypto.pad(text)
    assert len(block) == PLAINTEXT_SIZE
    assert int.from_bytes(block[:2], "little") == len(text)
    assert crypto.unpad(block) == text


def test_pad_rejects_long_text():
    with pytest.raises(crypto.PlaintextError):
        crypto.pad(bytes(MAX_TEXT + 1))


def test_unpad_rejects_bad_length_prefix():
    assert crypto.unpad((MAX_TEXT + 1).to_bytes(2, "little") + bytes(MAX_TEXT)) is None
    assert crypto.unpad(b"short") is None


# -- pairwise signcryption ----------------------------------------------

@given(plaintexts, st.integers(0, 2 ** 32))
def test_round_trip(m, seed):
    pkt = crypto.signcrypt(ALICE, BOB.pk, m, rng(seed))
    assert len(pkt) == PACKET_SIZE
    assert crypto.designcrypt(BOB, pkt) == (ALICE.pk, m)


@given(plaintexts)
def test_wrong_recipient_gets_bottom(m):
    pkt = crypto.signcrypt(ALICE, BOB.pk, m)
    assert crypto.designcrypt(CAROL, pkt) is None
    assert crypto.designcrypt(ALICE, pkt) is None


def test_fresh_randomness_gives_distinct_packets():
    m = crypto.pad(b"same")
    assert crypto.signcrypt(ALICE, BOB.pk, m) != crypto.signcrypt(ALICE, BOB.pk, m)


def test_seeded_randomness_is_reproducible():
    m = crypto.pad(b"same")
    assert crypto.signcrypt(ALICE, BOB.pk, m, rng(5)) == crypto.signcrypt(ALICE, BOB.pk, m, rng(5))


@pytest.mark.parametrize("n", [0, 1, 96, 98, 200])
def test_signcrypt_rejects_wrong_length_plaintext(n):
    with pytest.raises(crypto.PlaintextError):
        crypto.signcrypt(ALICE, BOB.pk, bytes(n))


@pytest.mark.parametrize("n", [0, 1, 254, 256, 1000])
def test_designcrypt_wrong_length_is_bottom(n):
    assert crypto.designcrypt(BOB, bytes(n)) is None


@given(st.binary(min_size=PACKET_SIZE, max_size=PACKET_SIZE))
def test_random_bytes_never_crash(junk):
    assert crypto.designcrypt(BOB, junk) is None


def test_every_single_bit_flip_is_rejected():
    pkt = crypto.signcrypt(ALICE, BOB.pk, crypto.pad(b"flip me"), rng(1))
    for bit in range(PACKET_SIZE * 8):
        buf = bytearray(pkt)
        buf[bit // 8] ^= 1 << (bit % 8)
        assert crypto.designcrypt(BOB, bytes(buf)) is None, bit


@given(st.lists(st.integers(0, PACKET_SIZE * 8 - 1), min_size=1, max_size=16, unique=True))
def test_multi_bit_corruption_rejected(bits):
    pkt = crypto.signcrypt(ALICE, BOB.pk, crypto.pad(b"multi"), rng(2))
    buf = bytearray(pkt)
    for bit in bits:
        buf[bit // 8] ^= 1 << (bit % 8)
    assert crypto.designcrypt(BOB, bytes(buf)) is None


@given(st.integers(1, PACKET_SIZE - 1))
def test_truncate_then_pad_rejected(cut):
    pkt = crypto.signcrypt(ALICE, BOB.pk, crypto.pad(b"trunc"), rng(3))
    mangled = pkt[:cut] + bytes(PACKET_SIZE - cut)
    if mangled != pkt:
        assert crypto.designcrypt(BOB, mangled) is None


def test_resigned_body_under_other_sender_is_rejected():
    # a signature from Carol over Alice's key claim must not verify
    m = crypto.pad(b"claim")
    body = ALICE.pk + crypto._sign(CAROL, ALICE.pk + m) + m
    assert crypto._open_body(body, b"", True) is None
    good = ALICE.pk + crypto._sign(ALICE, ALICE.pk + m) + m
    assert crypto._open_body(good, b"", True) == (ALICE.pk, m)


def test_dummy_packets_look_like_real_ones():
    dummy = crypto.keygen(b"dummy")
    pkt = crypto.signcrypt(ALICE, dummy.pk, bytes(np.random.default_rng(0).bytes(PLAINTEXT_SIZE)))
    assert len(pkt) == PACKET_SIZE


# -- vectors -------------------------------------------------------------

@pytest.mark.parametrize("v", VECTORS["pairwise"])
def test_frozen_vectors(v):
    sender = crypto.keygen(v["sender_seed"])
    recipient = crypto.keygen(v["recipient_seed"])
    assert sender.pk.hex() == v["sender_pk"]
    assert recipient.pk.hex() == v["recipient_pk"]
    assert recipient.sk.hex() == v["recipient_sk"]
    m = bytes.fromhex(v["plaintext"])
    pkt = bytes.fromhex(v["packet"])
    assert crypto.signcrypt(sender, recipient.pk, m, rng(v["rng_seed"])) == pkt
    assert crypto.designcrypt(crypto.KeyPair.from_secret(bytes.fromhex(v["recipient_sk"])),
                              pkt) == (sender.pk, m)


@pytest.mark.parametrize("v", VECTORS["group"])
def test_frozen_group_vectors(v):
    gk = crypto.GroupKey(bytes.fromhex(v["group_key"]), bytes.fromhex(v["group_id"]))
    sender = crypto.keygen(v["sender_seed"])
    m = bytes.fromhex(v["plaintext"])
    pkt = bytes.fromhex(v["packet"])
    assert crypto.group_signcrypt(sender, gk, m, rng(v["rng_seed"])) == pkt
    assert crypto.group_designcrypt(gk, pkt) == (sender.pk, m)


# -- groups --------------------------------------------------------------

GK = crypto.new_group_key(rng(11))


@given(plaintexts)
def test_group_round_trip(m):
    pkt = crypto.group_signcrypt(ALICE, GK, m)
    assert len(pkt) == PACKET_SIZE
    assert crypto.group_designcrypt(GK, pkt) == (ALICE.pk, m)


def test_group_key_shape():
    assert len(GK.key) == crypto.SYM_KEY_SIZE
    with pytest.raises(ValueError):
        crypto.GroupKey(bytes(16), bytes(8))


def test_pairwise_and_group_domains_are_separate():
    m = crypto.pad(b"domains")
    assert crypto.group_designcrypt(GK, crypto.signcrypt(ALICE, BOB.pk, m)) is None
    assert crypto.designcrypt(BOB, crypto.group_signcrypt(ALICE, GK, m)) is None
    other = crypto.new_group_key(rng(12))
    assert crypto.group_designcrypt(other, crypto.group_signcrypt(ALICE, GK, m)) is None


def test_member_cannot_impersonate_another_member():
    # Bob holds the group key but not Alice's signing key
    r = rng(13)
    m = crypto.pad(b"from alice?")
    honest = crypto.group_signcrypt(ALICE, GK, m, r)
    for _ in range(1000):
        salt = r.bytes(KEM_SIZE)
        nonce = r.bytes(NONCE_SIZE)
        # graft Alice's identity onto a body Bob signs, or replay a random signature
        if r.random() < 0.5:
            sig = crypto._sign(BOB, crypto._GROUP_SIG_CONTEXT + GK.group_id + ALICE.pk + m)
        else:
            sig = r.bytes(SIG_SIZE)
        body = ALICE.pk + sig + m
        key = crypto._group_subkey(GK, salt)
        pkt = salt + nonce + crypto.AESGCM(key).encrypt(nonce, body, salt)
        out = crypto.group_designcrypt(GK, pkt)
        assert out is None or out[0] == BOB.pk
    assert crypto.group_designcrypt(GK, honest) == (ALICE.pk, m)


def test_group_bit_flips_rejected():
    pkt = crypto.group_signcrypt(ALICE, GK, crypto.pad(b"g"), rng(14))
    for bit in range(0, PACKET_SIZE * 8, 7):
        buf = bytearray(pkt)
        buf[bit // 8] ^= 1 << (bit % 8)
        assert crypto.group_designcrypt(GK, bytes(buf)) is None


# -- suites --------------------------------------------------------------

def test_unauthenticated_suite_leaks_bit_flips():
    suite = crypto.UnauthenticatedSuite()
    m = crypto.pad(b"sabotage")
    pkt = crypto.signcrypt(ALICE, BOB.pk, m, rng(15))
    assert suite.designcrypt(BOB, pkt) == (ALICE.pk, m)
    buf = bytearray(pkt)
    buf[KEM_SIZE + NONCE_SIZE + PK_SIZE + SIG_SIZE + 5] ^= 1
    sender, m2 = suite.designcrypt(BOB, bytes(buf))
    assert sender == ALICE.pk and m2 != m
    assert crypto.DEFAULT_SUITE.designcrypt(BOB, bytes(buf)) is None


def test_message_id_is_hash_of_packet():
    pkt = crypto.signcrypt(ALICE, BOB.pk, crypto.pad(b"id"))
    assert crypto.message_id(pkt) == crypto.message_id(bytes(pkt))
    assert len(crypto.message_id(pkt)) == 32
