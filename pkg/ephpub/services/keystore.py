"""
Ephemeral key storage in resolver caches.

A bit cell is a (resolver, domain) pair. Writing a 1 caches the domain with
a recursive query; writing a 0 sends nothing. Reading is a non-recursive
query: Hit is 1, Miss is 0, no answer is an erasure.
"""

import logging
import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from ephpub.config import Settings, settings
from ephpub.exceptions import (
    AmbiguousSkew,
    AuthFailure,
    DecodeFailure,
    EncodeFailure,
    Expired,
    InputError,
    InsufficientDomains,
    WriteFailure,
)
from ephpub.schemas import (
    BitCell,
    BitReading,
    BitState,
    DnsQuestion,
    DomainCandidate,
    OutcomeKind,
    QueryMode,
    ResolverEndpoint,
)
from ephpub.services.epo_core import (
    EphemeralKey,
    EpoObject,
    decrypt_message,
    encrypt_message,
    epo_build,
)
from ephpub.services.rs6355 import RsCodeword, codec_for
from ephpub.services.transport import Transport
from ephpub.utils.helpers import bounded_gather, format_duration, hamming_weight

logger = logging.getLogger(__name__)

@dataclass
class CellPlan:
    cells: List[BitCell]
    codeword: RsCodeword
    write_order: List[int]

    @property
    def bits(self) -> List[int]:
        return self.codeword.to_bits()


@dataclass
class ProtocolStats:
    prechecks: int = 0
    prefetches: int = 0
    writes: int = 0
    reads: int = 0
    replans: int = 0
    resolver_swaps: int = 0
    discarded_candidates: int = 0
    parity_fetched: bool = False

    @property
    def total_queries(self) -> int:
        return self.prechecks + self.prefetches + self.writes + self.reads


def _question(domain: str, mode: QueryMode, config: Settings) -> DnsQuestion:
    return DnsQuestion(qname=domain, qtype=config.QUERY_TYPE, mode=mode)


# ========== SELECTION ==========

def select_resolvers(
    dataset: Sequence[ResolverEndpoint],
    n: int,
    rng: Optional[random.Random] = None,
) -> List[ResolverEndpoint]:
    """n distinct resolvers, uniformly without replacement"""
    unique = list(dict.fromkeys(dataset))
    if n > len(unique):
        raise InputError(f"dataset holds {len(unique)} resolvers, {n} needed")
    rng = rng or random.SystemRandom()
    return rng.sample(unique, n)


def candidates_for_ttl(
    pool: Sequence[DomainCandidate],
    target_ttl: int,
    tolerance: float,
) -> List[DomainCandidate]:
    slack = target_ttl * tolerance
    return [c for c in pool if abs(c.authoritative_ttl - target_ttl) <= slack]


async def _precheck(transport: Transport, resolver: ResolverEndpoint, domain: str, config: Settings) -> OutcomeKind:
    outcome = await transport.query(resolver, _question(domain, QueryMode.NON_RECURSIVE, config))
    return outcome.kind


async def select_domains(
    transport: Transport,
    resolvers: Sequence[ResolverEndpoint],
    domain_pool: Sequence[DomainCandidate],
    target_ttl: int,
    tolerance: Optional[float] = None,
    config: Optional[Settings] = None,
    rng: Optional[random.Random] = None,
    stats: Optional[ProtocolStats] = None,
    exclude: Iterable[str] = (),
    spare_resolvers: Optional[List[ResolverEndpoint]] = None,
) -> List[BitCell]:
    """
    Pair each resolver with a domain it does not currently cache. A cached
    candidate is discarded and a fresh one drawn; a domain is used at most
    once.

    A resolver whose precheck gets no answer, or that keeps answering from
    cache, is swapped for the next entry of `spare_resolvers` (consumed in
    place). An unanswered candidate goes back to the pool. Without spares
    the cell keeps its resolver and draws again.
    """
    config = config or settings
    tolerance = config.TTL_TOLERANCE if tolerance is None else tolerance
    rng = rng or random.SystemRandom()
    stats = stats if stats is not None else ProtocolStats()
    spare = spare_resolvers if spare_resolvers is not None else []

    used = set(exclude)
    remaining = [c for c in candidates_for_ttl(domain_pool, target_ttl, tolerance) if c.name not in used]
    rng.shuffle(remaining)
    if not remaining:
        raise InsufficientDomains(f"no domains with requested TTL ({target_ttl}s)")

    assigned = list(resolvers)
    hits = [0] * len(assigned)
    chosen: Dict[int, DomainCandidate] = {}
    pending = list(range(len(assigned)))
    while pending:
        if len(remaining) < len(pending):
            raise InsufficientDomains(
                f"domain pool exhausted: {len(pending)} cells still need a domain near {target_ttl}s"
            )
        attempt = {index: remaining.pop() for index in pending}
        kinds = await bounded_gather(
            (_precheck(transport, assigned[i], attempt[i].name, config) for i in pending),
            config.PARALLELISM,
        )
        stats.prechecks += len(pending)
        retry = []
        for index, kind in zip(pending, kinds):
            if kind == OutcomeKind.MISS:
                chosen[index] = attempt[index]
                continue
            retry.append(index)
            if kind == OutcomeKind.HIT:
                logger.debug("discarding %s, cached on %s", attempt[index].name, assigned[index])
                stats.discarded_candidates += 1
                hits[index] += 1
                if hits[index] < config.PRECHECK_HIT_LIMIT:
                    continue
            elif spare:
                remaining.insert(0, attempt[index])
            else:
                stats.discarded_candidates += 1
            if spare:
                logger.debug("replacing %s (%s) with a spare resolver", assigned[index], kind.value)
                assigned[index] = spare.pop()
                hits[index] = 0
                stats.resolver_swaps += 1
        pending = retry

    return [
        BitCell(resolver=assigned[i], domain=chosen[i].name, expected_ttl=chosen[i].authoritative_ttl)
        for i in range(len(assigned))
    ]


# ========== BIT OPERATIONS ==========

def prefetch_name(domain: str, label: str) -> str:
    """Sibling name under the same parent domain"""
    _, dot, parent = domain.partition(".")
    return f"{label}.{parent}" if dot and parent else f"{label}.{domain}"


async def prefetch_domain(transport: Transport, cell: BitCell, config: Optional[Settings] = None) -> None:
    config = config or settings
    q = _question(prefetch_name(cell.domain, config.PREFETCH_LABEL), QueryMode.RECURSIVE, config)
    try:
        await transport.query(cell.resolver, q)
    except Exception as exc:  # best effort
        logger.debug("prefetch on %s failed: %s", cell.resolver, exc)


async def write_bit(transport: Transport, cell: BitCell, bit: int, config: Optional[Settings] = None) -> None:
    if bit not in (0, 1):
        raise InputError(f"bit must be 0 or 1, got {bit!r}")
    if bit == 0:
        return
    config = config or settings
    outcome = await transport.query(cell.resolver, _question(cell.domain, QueryMode.RECURSIVE, config))
    if not outcome.is_hit:
        raise WriteFailure(f"recursive query for {cell.domain} returned {outcome.kind.value}", cell=cell)


async def read_bit(
    transport: Transport,
    cell: BitCell,
    position: int = 0,
    config: Optional[Settings] = None,
) -> BitReading:
    config = config or settings
    outcome = await transport.query(cell.resolver, _question(cell.domain, QueryMode.NON_RECURSIVE, config))
    if outcome.kind == OutcomeKind.HIT:
        return BitReading(position=position, state=BitState.ONE, remaining_ttl=outcome.remaining_ttl)
    if outcome.kind == OutcomeKind.MISS:
        return BitReading(position=position, state=BitState.ZERO)
    return BitReading(position=position, state=BitState.ERASURE)


async def read_cells(
    transport: Transport,
    epo: EpoObject,
    positions: Sequence[int],
    config: Optional[Settings] = None,
    stats: Optional[ProtocolStats] = None,
) -> List[BitReading]:
    config = config or settings
    readings = await bounded_gather(
        (read_bit(transport, epo.cells[p], p, config) for p in positions),
        config.PARALLELISM,
    )
    if stats is not None:
        stats.reads += len(positions)
    return readings


# ========== ENCODE ==========

async def _replan_cell(
    transport: Transport,
    cell: BitCell,
    spare_resolvers: List[ResolverEndpoint],
    pool: Sequence[DomainCandidate],
    target_ttl: int,
    used_domains: Set[str],
    config: Settings,
    rng: random.Random,
    stats: ProtocolStats,
) -> BitCell:
    """Move a failed bit-1 cell to fresh (resolver, domain) pairs until a write lands"""
    for attempt in range(config.REPLAN_BUDGET):
        if not spare_resolvers:
            break
        resolver = spare_resolvers.pop()
        stats.replans += 1
        try:
            (fresh,) = await select_domains(
                transport, [resolver], pool, target_ttl,
                config=config, rng=rng, stats=stats, exclude=used_domains, spare_resolvers=spare_resolvers,
            )
        except InsufficientDomains as exc:
            raise EncodeFailure(str(exc), stage="replan")
        used_domains.add(fresh.domain)
        if config.PREFETCH:
            await prefetch_domain(transport, fresh, config)
            stats.prefetches += 1
        try:
            await write_bit(transport, fresh, 1, config)
            stats.writes += 1
            logger.info("cell moved from %s to %s after %d replans", cell.resolver, fresh.resolver, attempt + 1)
            return fresh
        except WriteFailure as exc:
            stats.writes += 1
            logger.warning("replan %d for %s failed: %s", attempt + 1, cell.domain, exc)
    raise EncodeFailure(f"bit-1 write for {cell.domain} failed after {config.REPLAN_BUDGET} replans", stage="write")


async def encode_message(
    transport: Transport,
    dataset: Sequence[ResolverEndpoint],
    pool: Sequence[DomainCandidate],
    message: bytes,
    ttl: int,
    config: Optional[Settings] = None,
    rng: Optional[random.Random] = None,
    stats: Optional[ProtocolStats] = None,
    key: Optional[EphemeralKey] = None,
) -> EpoObject:
    """
    Store a fresh random key in resolver caches and return the EPO holding
    the encrypted message. `rng` makes key, cell and order choices
    reproducible; leave it unset outside simulations. A caller-supplied
    `key` is zeroized like a generated one.
    """
    config = config or settings
    rng = rng or random.SystemRandom()
    stats = stats if stats is not None else ProtocolStats()
    codec = codec_for(config.KEY_BITS)

    if key is None:
        key = EphemeralKey.generate(config.KEY_BITS, None if isinstance(rng, random.SystemRandom) else rng)
    elif key.key_bits != config.KEY_BITS:
        raise InputError(f"key has {key.key_bits} bits, configuration expects {config.KEY_BITS}")
    try:
        codeword = codec.encode(key.bits)
        bits = codeword.to_bits()
        n = len(bits)

        resolvers = select_resolvers(dataset, n, rng)
        selected = set(resolvers)
        spare = [r for r in dict.fromkeys(dataset) if r not in selected]
        rng.shuffle(spare)
        cells = await select_domains(
            transport, resolvers, pool, ttl, config=config, rng=rng, stats=stats, spare_resolvers=spare
        )
        used_domains = {cell.domain for cell in cells}
        plan = CellPlan(cells=cells, codeword=codeword, write_order=rng.sample(range(n), n))

        if config.PREFETCH:
            await bounded_gather(
                (prefetch_domain(transport, plan.cells[i], config) for i in plan.write_order),
                config.PARALLELISM,
            )
            stats.prefetches += n

        ones = [i for i in plan.write_order if bits[i]]
        # earliest write; later writes expire later
        write_started = transport.now()
        results = await bounded_gather(
            (_write_capturing(transport, plan.cells[i], config) for i in ones),
            config.PARALLELISM,
        )
        stats.writes += len(ones)
        for i, failure in zip(ones, results):
            if failure is None:
                continue
            logger.warning("write failed on %s: %s", plan.cells[i].resolver, failure)
            plan.cells[i] = await _replan_cell(
                transport, plan.cells[i], spare, pool, ttl, used_domains, config, rng, stats
            )

        now = transport.now()
        expiry = int(write_started) + min(cell.expected_ttl for cell in plan.cells)
        nonce = bytes(rng.getrandbits(8) for _ in range(12))
        ciphertext = encrypt_message(message, key, nonce)
        epo = epo_build(ciphertext, plan.cells, expiry, now=now, key_bits=config.KEY_BITS)
        logger.info(
            "encoded %d bytes into %d cells (weight %d), expiry %d, lifetime %s",
            len(message), n, hamming_weight(bits), expiry, format_duration(expiry - int(write_started)),
        )
        return epo
    finally:
        key.zeroize()


async def _write_capturing(transport: Transport, cell: BitCell, config: Settings) -> Optional[WriteFailure]:
    try:
        await write_bit(transport, cell, 1, config)
    except WriteFailure as exc:
        return exc
    return None


# ========== DECODE ==========

def check_expiry(epo: EpoObject, now: float, config: Optional[Settings] = None) -> None:
    config = config or settings
    if now >= epo.expiry - config.CLOCK_SKEW_SECONDS:
        raise Expired(epo.expiry, now)


def recover_message(epo: EpoObject, readings: Sequence[BitReading], config: Optional[Settings] = None) -> bytes:
    """
    Decrypt from a set of readings. Data readings without erasures are tried
    as-is first; otherwise, or when that fails, all cells are run through the
    RS decoder.
    """
    by_position = {reading.position: reading for reading in readings}
    codec = codec_for(epo.key_bits)
    data = [by_position.get(p) for p in range(epo.key_bits)]

    if all(r is not None and r.state != BitState.ERASURE for r in data):
        key = EphemeralKey.from_bits([r.bit for r in data])
        try:
            return decrypt_message(epo.ciphertext, key)
        except AuthFailure:
            if len(by_position) < len(epo.cells):
                raise
        finally:
            key.zeroize()

    if len(by_position) < len(epo.cells):
        raise DecodeFailure("parity readings are required", readings=list(readings))
    bits = [by_position[p].bit for p in range(len(epo.cells))]
    try:
        key_bits = codec.decode(codec.readings_from_bits(bits))
    except DecodeFailure as exc:
        raise DecodeFailure(str(exc), readings=list(readings))
    key = EphemeralKey.from_bits(key_bits)
    try:
        return decrypt_message(epo.ciphertext, key)
    except AuthFailure:
        raise DecodeFailure("corrected key does not authenticate the message", readings=list(readings))
    finally:
        key.zeroize()


async def decode_message(
    transport: Transport,
    epo: EpoObject,
    config: Optional[Settings] = None,
    force: bool = False,
    stats: Optional[ProtocolStats] = None,
) -> bytes:
    config = config or settings
    stats = stats if stats is not None else ProtocolStats()
    if not force:
        check_expiry(epo, transport.now(), config)

    readings = await read_cells(transport, epo, range(epo.key_bits), config, stats)
    if not any(r.state == BitState.ERASURE for r in readings):
        try:
            return recover_message(epo, readings, config)
        except AuthFailure:
            logger.info("data bits do not authenticate; fetching parity")
    else:
        logger.info("%d erasures in data bits; fetching parity", sum(r.state == BitState.ERASURE for r in readings))

    stats.parity_fetched = True
    readings += await read_cells(transport, epo, range(epo.key_bits, len(epo.cells)), config, stats)
    return recover_message(epo, readings, config)


# ========== TTL SKEW ==========

def split_two_means(values: Sequence[int]) -> Tuple[float, int]:
    """
    Best split of sorted 1-D values into two clusters by within-cluster
    squared error. Returns (threshold, gap) where `gap` separates the largest
    value of the low cluster from the smallest of the high one.
    """
    ordered = sorted(values)
    if len(ordered) < 2 or ordered[0] == ordered[-1]:
        return float(ordered[-1]) if ordered else 0.0, 0
    prefix = [0]
    squares = [0]
    for value in ordered:
        prefix.append(prefix[-1] + value)
        squares.append(squares[-1] + value * value)
    n = len(ordered)
    best: Optional[Tuple[float, int]] = None
    for k in range(1, n):
        if ordered[k] == ordered[k - 1]:
            continue
        low = squares[k] - prefix[k] ** 2 / k
        high = (squares[n] - squares[k]) - (prefix[n] - prefix[k]) ** 2 / (n - k)
        cost = low + high
        if best is None or cost < best[0]:
            best = (cost, k)
    k = best[1]
    return (ordered[k - 1] + ordered[k]) / 2.0, ordered[k] - ordered[k - 1]


async def ttl_skew_read(
    transport: Transport,
    epo: EpoObject,
    config: Optional[Settings] = None,
    stats: Optional[ProtocolStats] = None,
) -> List[BitReading]:
    """
    After every cell was forced into the caches, cells written by the sender
    hold less remaining TTL than the ones the attacker filled in. The larger
    cluster of remaining TTLs reads as 0.
    """
    config = config or settings
    readings = await read_cells(transport, epo, range(len(epo.cells)), config, stats)
    if any(r.state != BitState.ONE for r in readings):
        raise InputError("ttl-skew read needs every cell cached; use a normal read")
    threshold, gap = split_two_means([r.remaining_ttl for r in readings])
    if gap < config.SKEW_MIN_GAP_SECONDS:
        raise AmbiguousSkew(gap, config.SKEW_MIN_GAP_SECONDS)
    return [
        BitReading(
            position=r.position,
            state=BitState.ZERO if r.remaining_ttl > threshold else BitState.ONE,
            remaining_ttl=r.remaining_ttl,
        )
        for r in readings
    ]
