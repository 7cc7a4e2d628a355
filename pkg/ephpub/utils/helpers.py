import asyncio
import re
from typing import Awaitable, Iterable, List, Sequence, TypeVar

from ephpub.exceptions import InputError

T = TypeVar("T")

_DURATION_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhdw]?)\s*$", re.IGNORECASE)


def parse_duration(text: str) -> int:
    """Parse `86400`, `30m`, `24h`, `7d` or `1w` into whole seconds"""
    match = _DURATION_RE.match(str(text))
    if not match:
        raise InputError(f"Invalid duration: {text!r}")
    value, unit = match.groups()
    return int(round(float(value) * _DURATION_UNITS[(unit or "s").lower()]))


def format_duration(seconds: float) -> str:
    seconds = int(seconds)
    for unit, size in (("d", 86400), ("h", 3600), ("m", 60)):
        if seconds and seconds % size == 0:
            return f"{seconds // size}{unit}"
    return f"{seconds}s"


# ========== BIT PACKING ==========

def bytes_to_bits(data: bytes, nbits: int = None) -> List[int]:
    """Most-significant bit first"""
    bits = [(byte >> (7 - i)) & 1 for byte in data for i in range(8)]
    if nbits is not None:
        bits = bits[:nbits]
    return bits


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    """Most-significant bit first; the last byte is zero-padded on the right"""
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def hamming_weight(bits: Iterable[int]) -> int:
    return sum(1 for bit in bits if bit)


# ========== TABULAR OUTPUT ==========

def format_table(headers: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Tab-separated table with a `#`-prefixed header line"""
    lines = ["# " + "\t".join(headers)]
    for row in rows:
        lines.append("\t".join(_cell(value) for value in row))
    return "\n".join(lines)


def _cell(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# ========== CONCURRENCY ==========

async def bounded_gather(coros: Iterable[Awaitable[T]], limit: int) -> List[T]:
    """gather() with at most `limit` coroutines in flight; results keep input order"""
    semaphore = asyncio.Semaphore(limit)

    async def run(coro: Awaitable[T]) -> T:
        async with semaphore:
            return await coro

    return list(await asyncio.gather(*(run(coro) for coro in coros)))
