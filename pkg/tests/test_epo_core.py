import random
import struct
import zlib

import pytest

from ephpub.exceptions import AuthFailure, InputError, ParseError
from ephpub.schemas import BitCell, ResolverEndpoint
from ephpub.services.epo_core import (
    HEADER_SIZE,
    EphemeralKey,
    epo_build,
    epo_overhead_bytes,
    epo_parse,
    epo_serialize,
    decrypt_message,
    encrypt_message,
    generate_receiver_keypair,
    is_wrapped,
    load_private_key,
    load_public_key,
    private_key_to_pem,
    public_key_to_pem,
    render_epo,
    super_decrypt,
    super_encrypt,
)


def make_cells(n=176, ttl=86400, seed=0):
    rng = random.Random(seed)
    addresses = rng.sample(range(1 << 24), n)
    return [
        BitCell(
            resolver=ResolverEndpoint(address=f"10.{a >> 16}.{(a >> 8) & 255}.{a & 255}"),
            domain=f"h{rng.randrange(10 ** 12):012d}.isp.fr",
            expected_ttl=ttl,
        )
        for a in addresses
    ]


def make_epo(ciphertext=b"", seed=0, ttl=86400):
    return epo_build(ciphertext, make_cells(seed=seed, ttl=ttl), expiry=1_700_000_000)


# ========== BUILD ==========

def test_build_checks_cell_count():
    with pytest.raises(InputError):
        epo_build(b"", make_cells(175), expiry=10)


def test_build_rejects_duplicate_resolvers():
    cells = make_cells()
    cells[1] = BitCell(resolver=cells[0].resolver, domain=cells[1].domain, expected_ttl=86400)
    with pytest.raises(InputError):
        epo_build(b"", cells, expiry=10)


def test_build_rejects_expiry_in_the_past():
    with pytest.raises(InputError):
        epo_build(b"", make_cells(), expiry=100, now=100)


def test_data_and_parity_cells():
    epo = make_epo()
    assert len(epo.data_cells) == 128
    assert len(epo.parity_cells) == 48


# ========== SERIALIZATION ==========

@pytest.mark.parametrize("compress", [None, True, False])
def test_serialized_epo_parses_back(compress):
    for seed in range(100):
        rng = random.Random(seed)
        ciphertext = bytes(rng.getrandbits(8) for _ in range(rng.randrange(28, 300)))
        epo = make_epo(ciphertext, seed=seed, ttl=rng.choice([300, 3600, 86400, 604800]))
        data = epo_serialize(epo, compress)
        assert epo_parse(data) == epo
        assert epo_serialize(epo_parse(data), compress) == data


def test_mixed_ttls_and_ports_survive():
    cells = make_cells()
    cells[3] = BitCell(resolver=ResolverEndpoint(address="192.0.2.3", port=5353), domain="a.example", expected_ttl=3600)
    cells[4] = BitCell(resolver=ResolverEndpoint(address="192.0.2.4"), domain="nodots", expected_ttl=7200)
    epo = epo_build(b"\x01\x02", cells, expiry=99)
    assert epo_parse(epo_serialize(epo)) == epo


def test_plain_overhead():
    # header, one ttl run, 176 cells of 4 + 2 + 1 + 20 bytes, body checksum
    assert epo_overhead_bytes(make_epo(), compress=False) == 26 + 8 + 176 * 27 + 4


def test_compressed_overhead_is_smaller():
    epo = make_epo()
    compressed = epo_overhead_bytes(epo)
    assert compressed < epo_overhead_bytes(epo, compress=False)
    assert 3072 <= compressed <= 4608


@pytest.mark.parametrize("compress", [True, False])
def test_every_header_byte_is_checked(compress):
    data = epo_serialize(make_epo(b"secret"), compress)
    for i in range(HEADER_SIZE):
        damaged = bytearray(data)
        damaged[i] ^= 0x01
        with pytest.raises(ParseError):
            epo_parse(bytes(damaged))


def test_body_damage_is_detected():
    data = epo_serialize(make_epo(b"ciphertext"))
    for i in range(HEADER_SIZE, len(data), 7):
        damaged = bytearray(data)
        damaged[i] ^= 0x80
        with pytest.raises(ParseError):
            epo_parse(bytes(damaged))


def test_truncation_and_trailing_bytes():
    data = epo_serialize(make_epo())
    for cut in (0, 3, HEADER_SIZE, len(data) - 1):
        with pytest.raises(ParseError):
            epo_parse(data[:cut])
    with pytest.raises(ParseError):
        epo_parse(data + b"\x00")


def test_bad_magic_reports_offset_zero():
    data = b"XXXX" + epo_serialize(make_epo())[4:]
    with pytest.raises(ParseError) as info:
        epo_parse(data)
    assert info.value.position == 0


def with_key_bits(data, key_bits):
    """Rewrite the key size field and reseal the header checksum"""
    header = bytearray(data[:HEADER_SIZE])
    struct.pack_into(">H", header, 6, key_bits)
    struct.pack_into(">I", header, HEADER_SIZE - 4, zlib.crc32(bytes(header[:HEADER_SIZE - 4])))
    return bytes(header) + data[HEADER_SIZE:]


@pytest.mark.parametrize("key_bits", [0, 400, 135, 65535])
def test_unsupported_key_size_is_a_parse_error(key_bits):
    with pytest.raises(ParseError) as info:
        epo_parse(with_key_bits(epo_serialize(make_epo()), key_bits))
    assert info.value.position == 6


def test_key_size_must_match_cell_count():
    # 134-bit keys need 182 cells
    with pytest.raises(ParseError) as info:
        epo_parse(with_key_bits(epo_serialize(make_epo()), 134))
    assert info.value.position == 6


def test_non_ascii_names_are_rejected():
    cells = make_cells()
    cells[0] = BitCell(resolver=cells[0].resolver, domain="bücher.example", expected_ttl=86400)
    with pytest.raises(InputError):
        epo_serialize(epo_build(b"", cells, expiry=1))


def test_render_lists_every_cell():
    text = render_epo(make_epo())
    assert "cells\t176" in text
    assert text.count("\tparity\t") == 48


# ========== ENCRYPTION ==========

def test_message_round_trip():
    key = EphemeralKey.generate(128, random.Random(1))
    ciphertext = encrypt_message(b"hello", key)
    assert decrypt_message(ciphertext, key) == b"hello"


def test_empty_message_is_nonce_and_tag():
    key = EphemeralKey.generate(128, random.Random(2))
    assert len(encrypt_message(b"", key)) == 28


def test_wrong_key_fails_authentication():
    rng = random.Random(3)
    key = EphemeralKey.generate(128, rng)
    ciphertext = encrypt_message(b"message", key)
    for _ in range(1000):
        with pytest.raises(AuthFailure):
            decrypt_message(ciphertext, EphemeralKey.generate(128, rng))


def test_short_ciphertext_fails_authentication():
    with pytest.raises(AuthFailure):
        decrypt_message(b"\x00" * 27, EphemeralKey.generate(128, random.Random(4)))


def test_longer_keys_are_expanded():
    key = EphemeralKey.generate(134, random.Random(5))
    assert len(key.cipher_key()) == 32
    assert decrypt_message(encrypt_message(b"x" * 100, key), key) == b"x" * 100


def test_key_bits_round_trip():
    key = EphemeralKey.generate(134, random.Random(6))
    assert EphemeralKey.from_bits(key.bits).material == key.material


def test_zeroize_erases_material():
    key = EphemeralKey.generate(128, random.Random(7))
    key.zeroize()
    assert not any(key.material)
    with pytest.raises(InputError):
        key.bits


# ========== RECIPIENT WRAPPING ==========

def test_wrapped_epo_opens_only_for_its_recipient():
    private_key, public_key = generate_receiver_keypair()
    other, _ = generate_receiver_keypair()
    data = epo_serialize(make_epo(b"payload"))
    wrapped = super_encrypt(data, public_key)
    assert is_wrapped(wrapped)
    assert b"isp.fr" not in wrapped
    assert super_decrypt(wrapped, private_key) == data
    with pytest.raises(AuthFailure):
        super_decrypt(wrapped, other)


def test_unwrapped_data_is_not_opened():
    private_key, _ = generate_receiver_keypair()
    with pytest.raises(ParseError):
        super_decrypt(epo_serialize(make_epo()), private_key)


def test_pem_round_trip():
    private_key, public_key = generate_receiver_keypair()
    restored = load_private_key(private_key_to_pem(private_key))
    assert public_key_to_pem(restored.public_key()) == public_key_to_pem(public_key)
    assert public_key_to_pem(load_public_key(public_key_to_pem(public_key))) == public_key_to_pem(public_key)
