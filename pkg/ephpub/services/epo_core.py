"""
The EphPub Object, its binary `.epo` format, and message encryption.

Layout (all integers big-endian):

    header   magic "EPO1" | version B | flags B | key_bits H | expiry Q
             | cell_count H | ciphertext_len I | crc32(previous 22 bytes) I
    body     ciphertext
             [suffix table: count B, then (len B, ascii) per suffix]  if FLAG_SUFFIXES
             ttl runs: run_count H, then (count H, ttl I) per run
             cells: addr 4s | port H | name
                    name = len B, ascii                             plain
                    name = suffix_index B (0xFF: none), len B, prefix  compressed
             crc32(body) I
"""

import logging
import os
import random
import secrets
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import List, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ephpub.config import SUPPORTED_KEY_BITS
from ephpub.exceptions import AuthFailure, InputError, ParseError
from ephpub.schemas import BitCell, ResolverEndpoint
from ephpub.services.rs6355 import DEFAULT_KEY_BITS, stored_bits_for
from ephpub.utils.helpers import bits_to_bytes, bytes_to_bits

logger = logging.getLogger(__name__)

EPO_MAGIC = b"EPO1"
EPO_VERSION = 1
FLAG_SUFFIXES = 0x01

_HEADER = struct.Struct(">4sBBHQHI")
_HEADER_CRC = struct.Struct(">I")
HEADER_SIZE = _HEADER.size + _HEADER_CRC.size
_NO_SUFFIX = 0xFF
_MAX_SUFFIXES = 254

NONCE_SIZE = 12
TAG_SIZE = 16

PLUS_MAGIC = b"EPX1"
_PLUS_INFO = b"ephpub-plus v1"
_KEY_INFO = b"ephpub key v1"


# ========== OBJECTS ==========

@dataclass(frozen=True)
class EpoObject:
    ciphertext: bytes
    cells: Tuple[BitCell, ...]
    expiry: int
    version: int = EPO_VERSION
    key_bits: int = DEFAULT_KEY_BITS

    @property
    def data_cells(self) -> Tuple[BitCell, ...]:
        return self.cells[: self.key_bits]

    @property
    def parity_cells(self) -> Tuple[BitCell, ...]:
        return self.cells[self.key_bits:]


@dataclass
class EphemeralKey:
    """Single-owner key material; call zeroize() once the key has been used"""

    material: bytearray
    key_bits: int = DEFAULT_KEY_BITS
    erase_after_use: bool = True
    _erased: bool = field(default=False, repr=False)

    @classmethod
    def generate(cls, key_bits: int = DEFAULT_KEY_BITS, rng: Optional[random.Random] = None) -> "EphemeralKey":
        nbytes = (key_bits + 7) // 8
        if rng is None:
            value = secrets.randbits(key_bits)
        else:
            value = rng.getrandbits(key_bits)
        # left-align so that bits_to_bytes(bits) round-trips
        value <<= nbytes * 8 - key_bits
        return cls(bytearray(value.to_bytes(nbytes, "big")), key_bits)

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "EphemeralKey":
        return cls(bytearray(bits_to_bytes(bits)), len(bits))

    @property
    def bits(self) -> List[int]:
        if self._erased:
            raise InputError("key material has been erased")
        return bytes_to_bits(bytes(self.material), self.key_bits)

    def cipher_key(self) -> bytes:
        """AES key: the raw 128 bits, or an HKDF expansion for other lengths"""
        if self._erased:
            raise InputError("key material has been erased")
        if self.key_bits == 128:
            return bytes(self.material)
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=_KEY_INFO).derive(bytes(self.material))

    def zeroize(self) -> None:
        for i in range(len(self.material)):
            self.material[i] = 0
        self._erased = True


def epo_build(
    ciphertext: bytes,
    cells: Sequence[BitCell],
    expiry: int,
    now: Optional[float] = None,
    key_bits: int = DEFAULT_KEY_BITS,
) -> EpoObject:
    expected = stored_bits_for(key_bits)
    if len(cells) != expected:
        raise InputError(f"an EPO needs {expected} cells, got {len(cells)}")
    resolvers = [cell.resolver for cell in cells]
    if len(set(resolvers)) != len(resolvers):
        raise InputError("cell resolvers must be pairwise distinct")
    if now is not None and expiry <= now:
        raise InputError(f"expiry {expiry} is not in the future (now {now:.0f})")
    if not 0 <= expiry < 1 << 64:
        raise InputError("expiry must fit an unsigned 64-bit integer")
    return EpoObject(bytes(ciphertext), tuple(cells), int(expiry), EPO_VERSION, key_bits)


# ========== SERIALIZATION ==========

def _split_name(name: str) -> Tuple[str, str]:
    """`h000123456789.dsl.net` -> (`h000123456789`, `dsl.net`)"""
    head, dot, tail = name.partition(".")
    return (head, tail) if dot else (name, "")


def _suffix_table(cells: Sequence[BitCell]) -> List[str]:
    counts = Counter(_split_name(cell.domain)[1] for cell in cells)
    counts.pop("", None)
    return [suffix for suffix, n in counts.most_common(_MAX_SUFFIXES) if n > 1]


def _ttl_runs(cells: Sequence[BitCell]) -> List[Tuple[int, int]]:
    runs: List[Tuple[int, int]] = []
    for cell in cells:
        if runs and runs[-1][1] == cell.expected_ttl and runs[-1][0] < 0xFFFF:
            runs[-1] = (runs[-1][0] + 1, cell.expected_ttl)
        else:
            runs.append((1, cell.expected_ttl))
    return runs


def _ascii(text: str) -> bytes:
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError:
        raise InputError(f"name is not ascii: {text!r}")
    if len(raw) > 255:
        raise InputError(f"name too long for the EPO format: {text!r}")
    return raw


def _encode_body(epo: EpoObject, suffixes: Optional[List[str]]) -> bytes:
    out = bytearray(epo.ciphertext)
    index = {}
    if suffixes is not None:
        out.append(len(suffixes))
        for i, suffix in enumerate(suffixes):
            raw = _ascii(suffix)
            out.append(len(raw))
            out += raw
            index[suffix] = i

    runs = _ttl_runs(epo.cells)
    out += struct.pack(">H", len(runs))
    for count, ttl in runs:
        out += struct.pack(">HI", count, ttl)

    for cell in epo.cells:
        out += cell.resolver.address.packed
        out += struct.pack(">H", cell.resolver.port)
        if suffixes is None:
            raw = _ascii(cell.domain)
            out.append(len(raw))
            out += raw
            continue
        head, tail = _split_name(cell.domain)
        if tail in index:
            out.append(index[tail])
            raw = _ascii(head)
        else:
            out.append(_NO_SUFFIX)
            raw = _ascii(cell.domain)
        out.append(len(raw))
        out += raw
    return bytes(out)


def epo_serialize(epo: EpoObject, compress: Optional[bool] = None) -> bytes:
    """
    Canonical encoding. With `compress=None` the suffix table is used exactly
    when it makes the output smaller.
    """
    plain = _encode_body(epo, None)
    body, flags = plain, 0
    if compress is not False:
        packed = _encode_body(epo, _suffix_table(epo.cells))
        if compress or len(packed) < len(plain):
            body, flags = packed, FLAG_SUFFIXES
    header = _HEADER.pack(
        EPO_MAGIC, epo.version, flags, epo.key_bits, epo.expiry, len(epo.cells), len(epo.ciphertext)
    )
    return (
        header
        + _HEADER_CRC.pack(zlib.crc32(header))
        + body
        + _HEADER_CRC.pack(zlib.crc32(body))
    )


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise ParseError(f"truncated {what}", position=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what: str) -> str:
        (length,) = self.unpack(">B", what)
        raw = self.take(length, what)
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError:
            raise ParseError(f"non-ascii {what}", position=self.offset - length)


def epo_parse(data: bytes) -> EpoObject:
    reader = _Reader(bytes(data))
    header = reader.take(_HEADER.size, "header")
    magic, version, flags, key_bits, expiry, cell_count, ct_len = _HEADER.unpack(header)
    if magic != EPO_MAGIC:
        raise ParseError("bad magic", position=0)
    (header_crc,) = reader.unpack(">I", "header checksum")
    if header_crc != zlib.crc32(header):
        raise ParseError("header checksum mismatch", position=_HEADER.size)
    if version != EPO_VERSION:
        raise ParseError(f"unsupported version {version}", position=4)
    if flags & ~FLAG_SUFFIXES:
        raise ParseError(f"unknown flags {flags:#04x}", position=5)
    if key_bits not in SUPPORTED_KEY_BITS:
        raise ParseError(f"unsupported key size {key_bits}", position=6)
    if stored_bits_for(key_bits) != cell_count:
        raise ParseError(f"{cell_count} cells do not match a {key_bits}-bit key", position=6)

    body_start = reader.offset
    ciphertext = reader.take(ct_len, "ciphertext")
    suffixes: Optional[List[str]] = None
    if flags & FLAG_SUFFIXES:
        (count,) = reader.unpack(">B", "suffix table")
        suffixes = [reader.name("suffix") for _ in range(count)]

    ttls: List[int] = []
    (run_count,) = reader.unpack(">H", "ttl runs")
    for _ in range(run_count):
        count, ttl = reader.unpack(">HI", "ttl run")
        ttls.extend([ttl] * count)
        if len(ttls) > cell_count:
            break
    if len(ttls) != cell_count:
        raise ParseError(f"ttl runs cover {len(ttls)} cells, expected {cell_count}", position=reader.offset)

    cells: List[BitCell] = []
    for ttl in ttls:
        position = reader.offset
        address, port = reader.unpack(">4sH", "cell")
        if suffixes is None:
            name = reader.name("domain")
        else:
            (index,) = reader.unpack(">B", "suffix index")
            prefix = reader.name("domain")
            if index == _NO_SUFFIX:
                name = prefix
            elif index < len(suffixes):
                name = f"{prefix}.{suffixes[index]}"
            else:
                raise ParseError(f"suffix index {index} out of range", position=position + 6)
        try:
            cells.append(
                BitCell(
                    resolver=ResolverEndpoint(address=IPv4Address(address), port=port),
                    domain=name,
                    expected_ttl=ttl,
                )
            )
        except ValueError as exc:
            raise ParseError(f"invalid cell: {exc}", position=position)

    body_end = reader.offset
    (body_crc,) = reader.unpack(">I", "body checksum")
    if body_crc != zlib.crc32(data[body_start:body_end]):
        raise ParseError("body checksum mismatch", position=body_end)
    if reader.offset != len(data):
        raise ParseError("trailing bytes", position=reader.offset)
    if len({cell.resolver for cell in cells}) != len(cells):
        raise ParseError("duplicate cell resolvers", position=body_start)
    return EpoObject(ciphertext, tuple(cells), expiry, version, key_bits)


def epo_overhead_bytes(epo: EpoObject, compress: Optional[bool] = None) -> int:
    return len(epo_serialize(epo, compress)) - len(epo.ciphertext)


def render_epo(epo: EpoObject) -> str:
    """Human-readable dump; not a canonical format"""
    lines = [
        f"version\t{epo.version}",
        f"key_bits\t{epo.key_bits}",
        f"expiry\t{epo.expiry}",
        f"ciphertext_bytes\t{len(epo.ciphertext)}",
        f"cells\t{len(epo.cells)}",
        f"overhead_bytes\t{epo_overhead_bytes(epo)}",
    ]
    for i, cell in enumerate(epo.cells):
        kind = "data" if i < epo.key_bits else "parity"
        lines.append(f"{i}\t{kind}\t{cell.resolver}\t{cell.domain}\t{cell.expected_ttl}")
    return "\n".join(lines)


# ========== MESSAGE ENCRYPTION ==========

def encrypt_message(message: bytes, key: EphemeralKey, nonce: Optional[bytes] = None) -> bytes:
    """nonce | AES-GCM ciphertext | tag"""
    nonce = nonce if nonce is not None else os.urandom(NONCE_SIZE)
    if len(nonce) != NONCE_SIZE:
        raise InputError(f"nonce must be {NONCE_SIZE} bytes")
    return nonce + AESGCM(key.cipher_key()).encrypt(nonce, bytes(message), None)


def decrypt_message(ciphertext: bytes, key: EphemeralKey) -> bytes:
    if len(ciphertext) < NONCE_SIZE + TAG_SIZE:
        raise AuthFailure("ciphertext shorter than nonce and tag")
    nonce, body = ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:]
    try:
        return AESGCM(key.cipher_key()).decrypt(nonce, body, None)
    except InvalidTag:
        raise AuthFailure("message authentication failed")


# ========== EPHPUB+ ==========

def generate_receiver_keypair() -> Tuple[X25519PrivateKey, X25519PublicKey]:
    private_key = X25519PrivateKey.generate()
    return private_key, private_key.public_key()


def _wrap_key(shared: bytes, ephemeral_public: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=ephemeral_public, info=_PLUS_INFO).derive(shared)


def _raw_public(public_key: X25519PublicKey) -> bytes:
    return public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def super_encrypt(epo_bytes: bytes, receiver_public_key: X25519PublicKey) -> bytes:
    """`EPX1` | ephemeral public key | nonce | ciphertext+tag"""
    ephemeral = X25519PrivateKey.generate()
    ephemeral_public = _raw_public(ephemeral.public_key())
    key = _wrap_key(ephemeral.exchange(receiver_public_key), ephemeral_public)
    nonce = os.urandom(NONCE_SIZE)
    sealed = AESGCM(key).encrypt(nonce, bytes(epo_bytes), PLUS_MAGIC)
    return PLUS_MAGIC + ephemeral_public + nonce + sealed


def super_decrypt(data: bytes, receiver_private_key: X25519PrivateKey) -> bytes:
    if data[:4] != PLUS_MAGIC:
        raise ParseError("not a wrapped EPO", position=0)
    if len(data) < 4 + 32 + NONCE_SIZE + TAG_SIZE:
        raise ParseError("truncated wrapped EPO", position=len(data))
    ephemeral_public = data[4:36]
    nonce = data[36:36 + NONCE_SIZE]
    key = _wrap_key(
        receiver_private_key.exchange(X25519PublicKey.from_public_bytes(ephemeral_public)),
        ephemeral_public,
    )
    try:
        return AESGCM(key).decrypt(nonce, data[36 + NONCE_SIZE:], PLUS_MAGIC)
    except InvalidTag:
        raise AuthFailure("wrapped EPO does not open with this private key")


def is_wrapped(data: bytes) -> bool:
    return data[:4] == PLUS_MAGIC


def private_key_to_pem(private_key: X25519PrivateKey) -> bytes:
    return private_key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def public_key_to_pem(public_key: X25519PublicKey) -> bytes:
    return public_key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)


def load_private_key(pem: bytes) -> X25519PrivateKey:
    key = serialization.load_pem_private_key(pem, password=None)
    if not isinstance(key, X25519PrivateKey):
        raise InputError("identity is not an X25519 private key")
    return key


def load_public_key(pem: bytes) -> X25519PublicKey:
    key = serialization.load_pem_public_key(pem)
    if not isinstance(key, X25519PublicKey):
        raise InputError("recipient is not an X25519 public key")
    return key
