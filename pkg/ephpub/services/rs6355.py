"""
GF(2^6) arithmetic and the shortened Reed-Solomon (63,55) codec.

A key is cut into 6-bit symbols, most significant bit first. For a 128-bit
key that gives 21 full symbols plus a 22nd holding the last 2 key bits in its
low positions; its 4 high bits are the shortening pad and are always zero.
Eight parity symbols follow the data symbols.

Stored layout (one ephemeral bit per position): the data bits without the pad,
then the parity bits, 6 per symbol, most significant first. 128 + 48 = 176.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

from ephpub.exceptions import DecodeFailure, DomainError, InputError

logger = logging.getLogger(__name__)

PRIMITIVE_POLY = 0x43  # x^6 + x + 1
FIELD_SIZE = 64
FIELD_ORDER = 63
SYMBOL_BITS = 6
GENERATOR = 2  # alpha

CODE_LENGTH = 63
CODE_DIMENSION = 55
PARITY_SYMBOLS = CODE_LENGTH - CODE_DIMENSION
DEFAULT_KEY_BITS = 128


# ========== FIELD ARITHMETIC ==========

def _build_tables(prim: int) -> Tuple[List[int], List[int]]:
    exp = [0] * (2 * FIELD_ORDER)
    log = [0] * FIELD_SIZE
    x = 1
    for i in range(FIELD_ORDER):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & FIELD_SIZE:
            x ^= prim
    for i in range(FIELD_ORDER, 2 * FIELD_ORDER):
        exp[i] = exp[i - FIELD_ORDER]
    return exp, log


GF_EXP, GF_LOG = _build_tables(PRIMITIVE_POLY)


def gf_add(a: int, b: int) -> int:
    return a ^ b


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return GF_EXP[GF_LOG[a] + GF_LOG[b]]


def gf_inverse(a: int) -> int:
    if a == 0:
        raise DomainError("zero has no multiplicative inverse")
    return GF_EXP[FIELD_ORDER - GF_LOG[a]]


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise DomainError("division by zero")
    if a == 0:
        return 0
    return GF_EXP[(GF_LOG[a] - GF_LOG[b]) % FIELD_ORDER]


def gf_pow(a: int, power: int) -> int:
    if a == 0:
        if power == 0:
            return 1
        if power < 0:
            raise DomainError("negative power of zero")
        return 0
    return GF_EXP[(GF_LOG[a] * power) % FIELD_ORDER]


def gf_arith(a: int, b: int, kind: str) -> int:
    """
    Single entry point for field operations.

    kind is one of `add`, `mul`, `inv` (inverse of a, b ignored) or `pow`
    (b is an integer exponent, not a field element).
    """
    if not 0 <= a < FIELD_SIZE:
        raise InputError(f"{a} is not an element of GF(64)")
    if kind == "pow":
        return gf_pow(a, b)
    if kind == "inv":
        return gf_inverse(a)
    if not 0 <= b < FIELD_SIZE:
        raise InputError(f"{b} is not an element of GF(64)")
    if kind == "add":
        return gf_add(a, b)
    if kind == "mul":
        return gf_mul(a, b)
    raise InputError(f"Unknown field operation: {kind}")


# ========== POLYNOMIALS (highest degree first) ==========

def _poly_scale(p: List[int], x: int) -> List[int]:
    return [gf_mul(c, x) for c in p]


def _poly_add(p: List[int], q: List[int]) -> List[int]:
    r = [0] * max(len(p), len(q))
    for i, c in enumerate(p):
        r[i + len(r) - len(p)] = c
    for i, c in enumerate(q):
        r[i + len(r) - len(q)] ^= c
    return r


def _poly_mul(p: List[int], q: List[int]) -> List[int]:
    r = [0] * (len(p) + len(q) - 1)
    for j, qc in enumerate(q):
        if qc == 0:
            continue
        for i, pc in enumerate(p):
            r[i + j] ^= gf_mul(pc, qc)
    return r


def _poly_eval(p: List[int], x: int) -> int:
    y = p[0]
    for c in p[1:]:
        y = gf_mul(y, x) ^ c
    return y


def _generator_poly(nsym: int) -> List[int]:
    g = [1]
    for i in range(nsym):
        g = _poly_mul(g, [1, gf_pow(GENERATOR, i)])
    return g


def _parity(msg: List[int], generator: List[int]) -> List[int]:
    nsym = len(generator) - 1
    out = list(msg) + [0] * nsym
    for i in range(len(msg)):
        coef = out[i]
        if coef:
            for j in range(1, len(generator)):
                out[i + j] ^= gf_mul(generator[j], coef)
    return out[len(msg):]


# ========== ERRORS-AND-ERASURES DECODING ==========

def _syndromes(msg: List[int], nsym: int) -> List[int]:
    # leading 0 keeps the evaluator arithmetic aligned with fcr = 0
    return [0] + [_poly_eval(msg, gf_pow(GENERATOR, i)) for i in range(nsym)]


def _errata_locator(coef_pos: List[int]) -> List[int]:
    loc = [1]
    for p in coef_pos:
        loc = _poly_mul(loc, _poly_add([1], [gf_pow(GENERATOR, p), 0]))
    return loc


def _error_evaluator(synd: List[int], err_loc: List[int], nsym: int) -> List[int]:
    product = _poly_mul(synd, err_loc)
    return product[len(product) - (nsym + 1):]


def _forney_syndromes(synd: List[int], erase_pos: Sequence[int], n: int) -> List[int]:
    fsynd = list(synd[1:])
    for p in erase_pos:
        x = gf_pow(GENERATOR, n - 1 - p)
        for j in range(len(fsynd) - 1):
            fsynd[j] = gf_mul(fsynd[j], x) ^ fsynd[j + 1]
    return fsynd


def _error_locator(synd: List[int], nsym: int, erase_count: int) -> List[int]:
    """Berlekamp-Massey over the erasure-free (Forney) syndromes"""
    err_loc = [1]
    old_loc = [1]
    for k in range(nsym - erase_count):
        delta = synd[k]
        for j in range(1, len(err_loc)):
            delta ^= gf_mul(err_loc[-(j + 1)], synd[k - j])
        old_loc = old_loc + [0]
        if delta != 0:
            if len(old_loc) > len(err_loc):
                new_loc = _poly_scale(old_loc, delta)
                old_loc = _poly_scale(err_loc, gf_inverse(delta))
                err_loc = new_loc
            err_loc = _poly_add(err_loc, _poly_scale(old_loc, delta))
    while err_loc and err_loc[0] == 0:
        del err_loc[0]
    errors = len(err_loc) - 1
    if 2 * errors + erase_count > nsym:
        raise DecodeFailure(f"{errors} errors and {erase_count} erasures exceed the correction bound")
    return err_loc


def _find_errors(err_loc_reversed: List[int], n: int) -> List[int]:
    """Chien search restricted to the n positions of the shortened code"""
    expected = len(err_loc_reversed) - 1
    positions = [
        n - 1 - i for i in range(n)
        if _poly_eval(err_loc_reversed, gf_pow(GENERATOR, i)) == 0
    ]
    if len(positions) != expected:
        raise DecodeFailure("error locator roots do not match its degree")
    return positions


def _correct_errata(msg: List[int], synd: List[int], err_pos: List[int]) -> List[int]:
    n = len(msg)
    coef_pos = [n - 1 - p for p in err_pos]
    err_loc = _errata_locator(coef_pos)
    err_eval = _error_evaluator(synd[::-1], err_loc, len(err_loc) - 1)[::-1]
    xs = [gf_pow(GENERATOR, p) for p in coef_pos]

    magnitudes = [0] * n
    for i, xi in enumerate(xs):
        xi_inv = gf_inverse(xi)
        denominator = 1
        for j, xj in enumerate(xs):
            if j != i:
                denominator = gf_mul(denominator, 1 ^ gf_mul(xi_inv, xj))
        if denominator == 0:
            raise DecodeFailure("could not compute error magnitude")
        y = gf_mul(xi, _poly_eval(err_eval[::-1], xi_inv))
        magnitudes[err_pos[i]] = gf_div(y, denominator)
    return _poly_add(msg, magnitudes)


def _correct(received: List[int], nsym: int, erase_pos: List[int]) -> List[int]:
    if len(erase_pos) > nsym:
        raise DecodeFailure(f"{len(erase_pos)} erasures exceed the {nsym} parity symbols")
    msg = list(received)
    for p in erase_pos:
        msg[p] = 0
    synd = _syndromes(msg, nsym)
    if max(synd) == 0:
        return msg
    fsynd = _forney_syndromes(synd, erase_pos, len(msg))
    err_loc = _error_locator(fsynd, nsym, len(erase_pos))
    err_pos = _find_errors(err_loc[::-1], len(msg))
    msg = _correct_errata(msg, synd, list(erase_pos) + err_pos)
    if max(_syndromes(msg, nsym)) > 0:
        raise DecodeFailure("syndromes remain nonzero after correction")
    logger.debug("Corrected %d errors and %d erasures", len(err_pos), len(erase_pos))
    return msg


# ========== CODEWORDS ==========

def _symbol_bits(value: int, width: int) -> List[int]:
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


@dataclass(frozen=True)
class RsCodeword:
    data_symbols: Tuple[int, ...]
    parity_symbols: Tuple[int, ...]
    pad_bits: int = 4

    def __post_init__(self):
        if self.pad_bits and self.data_symbols[-1] >> (SYMBOL_BITS - self.pad_bits):
            raise InputError("shortening pad bits must be zero")

    @property
    def symbols(self) -> Tuple[int, ...]:
        return self.data_symbols + self.parity_symbols

    def to_bits(self) -> List[int]:
        """Stored bits: data (pad omitted) then parity"""
        bits: List[int] = []
        last = len(self.data_symbols) - 1
        for i, symbol in enumerate(self.data_symbols):
            width = SYMBOL_BITS - self.pad_bits if i == last else SYMBOL_BITS
            bits.extend(_symbol_bits(symbol, width))
        for symbol in self.parity_symbols:
            bits.extend(_symbol_bits(symbol, SYMBOL_BITS))
        return bits


@dataclass(frozen=True)
class SymbolReading:
    position: int
    value: Optional[int] = None  # None marks an erasure

    @property
    def is_erasure(self) -> bool:
        return self.value is None

    @classmethod
    def erasure(cls, position: int) -> "SymbolReading":
        return cls(position=position)


class RsCodec:
    """Shortened systematic RS code over GF(64) for a given key length"""

    def __init__(self, key_bits: int = DEFAULT_KEY_BITS, parity_symbols: int = PARITY_SYMBOLS):
        if key_bits <= 0:
            raise InputError("key length must be positive")
        self.key_bits = key_bits
        self.data_symbol_count = -(-key_bits // SYMBOL_BITS)
        self.pad_bits = self.data_symbol_count * SYMBOL_BITS - key_bits
        self.parity_symbol_count = parity_symbols
        self.symbol_count = self.data_symbol_count + parity_symbols
        if self.symbol_count > CODE_LENGTH:
            raise InputError(f"{key_bits}-bit keys do not fit a length-{CODE_LENGTH} code")
        self.stored_bits = key_bits + parity_symbols * SYMBOL_BITS
        self._generator = _generator_poly(parity_symbols)

    def symbol_widths(self) -> List[int]:
        """Stored bits per symbol, in symbol order"""
        widths = [SYMBOL_BITS] * self.symbol_count
        widths[self.data_symbol_count - 1] = SYMBOL_BITS - self.pad_bits
        return widths

    def encode(self, key_bits: Sequence[int]) -> RsCodeword:
        bits = list(key_bits)
        if len(bits) != self.key_bits:
            raise InputError(f"expected {self.key_bits} key bits, got {len(bits)}")
        if any(bit not in (0, 1) for bit in bits):
            raise InputError("key bits must be 0 or 1")
        data = []
        for start in range(0, self.key_bits, SYMBOL_BITS):
            value = 0
            for bit in bits[start:start + SYMBOL_BITS]:
                value = (value << 1) | bit
            data.append(value)
        parity = _parity(data, self._generator)
        return RsCodeword(tuple(data), tuple(parity), self.pad_bits)

    def decode(self, readings: Iterable[SymbolReading]) -> List[int]:
        """Recover the key bits; raises DecodeFailure outside the 2e + f <= 8 bound"""
        by_position = {}
        for reading in readings:
            if reading.position in by_position:
                raise InputError(f"duplicate symbol position {reading.position}")
            if reading.value is not None and not 0 <= reading.value < FIELD_SIZE:
                raise InputError(f"symbol value {reading.value} out of range")
            by_position[reading.position] = reading
        if sorted(by_position) != list(range(self.symbol_count)):
            raise InputError(f"expected readings for positions 0..{self.symbol_count - 1}")

        received = [by_position[p].value or 0 for p in range(self.symbol_count)]
        erasures = [p for p in range(self.symbol_count) if by_position[p].is_erasure]
        corrected = _correct(received, self.parity_symbol_count, erasures)

        data = corrected[:self.data_symbol_count]
        if self.pad_bits and data[-1] >> (SYMBOL_BITS - self.pad_bits):
            raise DecodeFailure("corrected codeword has nonzero pad bits")
        widths = self.symbol_widths()
        bits: List[int] = []
        for i, symbol in enumerate(data):
            bits.extend(_symbol_bits(symbol, widths[i]))
        return bits

    def readings_from_bits(self, bits: Sequence[Optional[int]]) -> List[SymbolReading]:
        """Group stored bit values (None for an erased bit) into symbol readings"""
        if len(bits) != self.stored_bits:
            raise InputError(f"expected {self.stored_bits} stored bits, got {len(bits)}")
        readings = []
        offset = 0
        for position, width in enumerate(self.symbol_widths()):
            chunk = bits[offset:offset + width]
            offset += width
            if any(bit is None for bit in chunk):
                readings.append(SymbolReading.erasure(position))
                continue
            value = 0
            for bit in chunk:
                value = (value << 1) | bit
            readings.append(SymbolReading(position, value))
        return readings


@lru_cache()
def codec_for(key_bits: int = DEFAULT_KEY_BITS) -> RsCodec:
    return RsCodec(key_bits)


def stored_bits_for(key_bits: int = DEFAULT_KEY_BITS) -> int:
    return codec_for(key_bits).stored_bits


def rs_encode(key_bits: Sequence[int]) -> RsCodeword:
    return codec_for(DEFAULT_KEY_BITS).encode(key_bits)


def rs_decode(readings: Iterable[SymbolReading]) -> List[int]:
    return codec_for(DEFAULT_KEY_BITS).decode(readings)
