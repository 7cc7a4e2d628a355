"""
Reliable-resolver dataset and TTL-bucketed domain pool.

Resolvers go through four stages, in lockstep across a batch:

1. answers a recursive query for a probe domain
2. answers a non-recursive query for it from cache
3. the cached TTL counts down from the authoritative TTL
4. the entry is still there just before expiry, gone just after it, and a
   never-written probe domain is not resolved on a non-recursive query
"""

import asyncio
import logging
import random
import time
from ipaddress import IPv4Address
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

from ephpub.config import Settings, settings
from ephpub.exceptions import InputError
from ephpub.schemas import (
    Classification,
    DnsQuestion,
    DomainCandidate,
    OutcomeKind,
    QueryMode,
    QueryOutcome,
    ResolverAssessment,
    ResolverEndpoint,
    StageResult,
)
from ephpub.services.dns_wire import reverse_name
from ephpub.services.simnet import SimFabric
from ephpub.services.transport import Transport
from ephpub.utils.helpers import bounded_gather

logger = logging.getLogger(__name__)

DATASET_HEADER = "# ephpub-dataset v1"
POOL_HEADER = "# ephpub-pool v1"

STAGE_NAMES = {
    1: "recursive answer",
    2: "caching",
    3: "ttl fidelity",
    4: "persistence",
}


class ProbeSchedule(Protocol):
    async def sleep_until(self, when: float) -> None:
        ...


class WallClockSchedule:
    async def sleep_until(self, when: float) -> None:
        delay = when - time.time()
        if delay > 0:
            logger.info("waiting %.0fs for the persistence check", delay)
            await asyncio.sleep(delay)


class SimSchedule:
    def __init__(self, fabric: SimFabric):
        self.fabric = fabric

    async def sleep_until(self, when: float) -> None:
        self.fabric.advance_to(when)


def persistence_delta(ttl: int, config: Optional[Settings] = None) -> int:
    config = config or settings
    return max(config.PERSISTENCE_DELTA_MIN, int(ttl * config.PERSISTENCE_DELTA_FRACTION))


def _evidence(outcome: QueryOutcome, at: float, **extra) -> Dict:
    record = {"at": at, "kind": outcome.kind.value, "ttl": outcome.remaining_ttl}
    record.update(extra)
    return record


class _Probe:
    def __init__(self, endpoint: ResolverEndpoint):
        self.endpoint = endpoint
        self.results: List[StageResult] = []
        self.rejected_stage: Optional[int] = None
        self.reason: Optional[str] = None
        self.written_at: float = 0.0
        self.skew: Optional[int] = None

    @property
    def alive(self) -> bool:
        return self.rejected_stage is None

    def record(self, stage: int, passed: bool, evidence: List[Dict], reason: str = "") -> None:
        self.results.append(StageResult(stage=stage, name=STAGE_NAMES[stage], passed=passed, evidence=evidence))
        if not passed:
            self.rejected_stage = stage
            self.reason = reason or STAGE_NAMES[stage]

    def assessment(self) -> ResolverAssessment:
        return ResolverAssessment(
            endpoint=self.endpoint,
            stage_results=self.results,
            classification=Classification.RELIABLE if self.alive else Classification.REJECTED,
            rejected_stage=self.rejected_stage,
            reason=self.reason,
            observed_ttl_skew=self.skew,
        )


async def _query_all(
    transport: Transport,
    probes: Sequence[_Probe],
    domain: str,
    mode: QueryMode,
    config: Settings,
) -> List[Tuple[QueryOutcome, float]]:
    async def one(probe: _Probe) -> Tuple[QueryOutcome, float]:
        outcome = await transport.query(probe.endpoint, DnsQuestion(qname=domain, qtype=config.QUERY_TYPE, mode=mode))
        return outcome, transport.now()

    return await bounded_gather((one(p) for p in probes), config.PARALLELISM)


async def probe_population(
    transport: Transport,
    endpoints: Sequence[ResolverEndpoint],
    probe_domains: Sequence[DomainCandidate],
    schedule: ProbeSchedule,
    config: Optional[Settings] = None,
) -> List[ResolverAssessment]:
    config = config or settings
    if len(probe_domains) < 2:
        raise InputError("probing needs two probe domains")
    written, fresh = probe_domains[0], probe_domains[1]
    ttl = written.authoritative_ttl
    if ttl <= 0 or fresh.authoritative_ttl <= 0:
        raise InputError("probe domains need a positive TTL")
    slack = config.TTL_MATCH_SLACK
    probes = [_Probe(endpoint) for endpoint in endpoints]

    # stage 1
    for probe, (outcome, at) in zip(
        probes, await _query_all(transport, probes, written.name, QueryMode.RECURSIVE, config)
    ):
        probe.written_at = at
        if outcome.kind == OutcomeKind.TIMEOUT:
            probe.record(1, False, [_evidence(outcome, at)], "unreachable")
        else:
            probe.record(1, outcome.is_hit, [_evidence(outcome, at)], "no recursive answer")

    # stage 2
    alive = [p for p in probes if p.alive]
    for probe, (outcome, at) in zip(
        alive, await _query_all(transport, alive, written.name, QueryMode.NON_RECURSIVE, config)
    ):
        probe.record(2, outcome.is_hit, [_evidence(outcome, at)], "does not serve from cache")

    # stage 3, from the evidence already gathered
    for probe in (p for p in probes if p.alive):
        first = probe.results[0].evidence[0]
        cached = probe.results[1].evidence[0]
        expected = ttl - (cached["at"] - probe.written_at)
        probe.skew = int(round(expected - cached["ttl"]))
        passed = abs(first["ttl"] - ttl) <= slack and abs(probe.skew) <= slack
        probe.record(
            3, passed,
            [{"authoritative_ttl": ttl, "first_ttl": first["ttl"], "cached_ttl": cached["ttl"], "skew": probe.skew}],
            "ttl not honoured",
        )

    # stage 4
    alive = [p for p in probes if p.alive]
    if alive:
        delta = persistence_delta(ttl, config)
        await schedule.sleep_until(min(p.written_at for p in alive) + ttl - delta)
        before = await _query_all(transport, alive, written.name, QueryMode.NON_RECURSIVE, config)
        await schedule.sleep_until(max(p.written_at for p in alive) + ttl + delta)
        after = await _query_all(transport, alive, written.name, QueryMode.NON_RECURSIVE, config)
        untouched = await _query_all(transport, alive, fresh.name, QueryMode.NON_RECURSIVE, config)
        for probe, (b, b_at), (a, a_at), (u, u_at) in zip(alive, before, after, untouched):
            evidence = [
                _evidence(b, b_at, check="before expiry"),
                _evidence(a, a_at, check="after expiry"),
                _evidence(u, u_at, check="never written"),
            ]
            if not b.is_hit:
                probe.record(4, False, evidence, "entry lost before expiry")
            elif a.kind != OutcomeKind.MISS:
                probe.record(4, False, evidence, "entry served after expiry")
            elif u.kind != OutcomeKind.MISS:
                probe.record(4, False, evidence, "resolves non-recursive queries")
            else:
                probe.record(4, True, evidence)

    assessments = [p.assessment() for p in probes]
    logger.info(
        "probed %d resolvers: %d reliable",
        len(assessments), sum(a.is_reliable for a in assessments),
    )
    return assessments


async def probe_resolver(
    transport: Transport,
    endpoint: ResolverEndpoint,
    probe_domains: Sequence[DomainCandidate],
    schedule: ProbeSchedule,
    config: Optional[Settings] = None,
) -> ResolverAssessment:
    (assessment,) = await probe_population(transport, [endpoint], probe_domains, schedule, config)
    return assessment


async def build_resolver_dataset(
    transport: Transport,
    candidates: Sequence[ResolverEndpoint],
    probe_domains: Sequence[DomainCandidate],
    schedule: ProbeSchedule,
    config: Optional[Settings] = None,
    blocklist: Iterable[ResolverEndpoint] = (),
    path: Optional[str] = None,
    refresh: bool = False,
) -> List[ResolverAssessment]:
    """Probe candidates and optionally persist; with `refresh` the file is merged by endpoint"""
    blocked = set(blocklist)
    todo = [c for c in dict.fromkeys(candidates) if c not in blocked]
    if blocked:
        logger.info("skipping %d blocklisted resolvers", len(candidates) - len(todo))
    assessments = await probe_population(transport, todo, probe_domains, schedule, config)

    if path is None:
        return assessments
    merged: Dict[ResolverEndpoint, ResolverAssessment] = {}
    if refresh and Path(path).exists():
        for previous in load_assessments(path):
            if previous.endpoint not in blocked:
                merged[previous.endpoint] = previous
    for assessment in assessments:
        merged[assessment.endpoint] = assessment
    write_dataset(path, merged.values())
    return assessments


def stage_populations(assessments: Sequence[ResolverAssessment]) -> List[int]:
    """Candidates entering stage 1, then survivors of each stage"""
    counts = [len(assessments)]
    for stage in range(1, 5):
        counts.append(sum(1 for a in assessments if a.rejected_stage is None or a.rejected_stage > stage))
    return counts


# ========== DATASET FILES ==========

def write_dataset(path: str, assessments: Iterable[ResolverAssessment]) -> None:
    lines = [DATASET_HEADER]
    for a in sorted(assessments, key=lambda a: a.endpoint.sort_key()):
        skew = "-" if a.observed_ttl_skew is None else str(a.observed_ttl_skew)
        line = f"{a.endpoint.address} {a.endpoint.port} {a.classification.value} {skew}"
        if a.rejected_stage is not None:
            line += f" {a.rejected_stage}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n")


def _data_lines(path: str, header: str) -> List[Tuple[int, List[str]]]:
    file_path = Path(path)
    if not file_path.exists():
        raise InputError(f"{path} not found")
    lines = file_path.read_text().splitlines()
    if not lines or lines[0].strip() != header:
        raise InputError(f"{path}: expected header {header!r}")
    return [
        (number, line.split())
        for number, line in enumerate(lines[1:], 2)
        if line.strip() and not line.startswith("#")
    ]


def load_assessments(path: str) -> List[ResolverAssessment]:
    assessments = []
    for number, fields in _data_lines(path, DATASET_HEADER):
        if len(fields) not in (4, 5):
            raise InputError(f"{path}:{number}: expected 4 or 5 fields")
        try:
            assessments.append(
                ResolverAssessment(
                    endpoint=ResolverEndpoint(address=fields[0], port=int(fields[1])),
                    classification=Classification(fields[2]),
                    observed_ttl_skew=None if fields[3] == "-" else int(fields[3]),
                    rejected_stage=int(fields[4]) if len(fields) == 5 else None,
                )
            )
        except ValueError as exc:
            raise InputError(f"{path}:{number}: {exc}") from exc
    return assessments


def load_dataset(path: str) -> List[ResolverEndpoint]:
    """Reliable endpoints only"""
    return [a.endpoint for a in load_assessments(path) if a.is_reliable]


def load_blocklist(path: str) -> List[ResolverEndpoint]:
    blocked = []
    for number, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            blocked.append(ResolverEndpoint.parse(line))
        except ValueError as exc:
            raise InputError(f"{path}:{number}: {exc}") from exc
    return blocked


# ========== DOMAIN HARVESTING ==========

def _random_global_address(rng: random.Random) -> str:
    while True:
        address = IPv4Address(rng.getrandbits(32))
        if address.is_global:
            return str(address)


async def harvest_domains(
    transport: Transport,
    harvester: ResolverEndpoint,
    count: int,
    ttl_buckets: Sequence[int],
    rng: Optional[random.Random] = None,
    config: Optional[Settings] = None,
) -> List[DomainCandidate]:
    """
    Reverse-resolve random addresses and keep hostnames whose A record TTL
    falls exactly on a requested bucket, up to `count` per bucket.
    """
    config = config or settings
    rng = rng or random.SystemRandom()
    wanted = {int(bucket): count for bucket in ttl_buckets if count > 0}
    found: Dict[int, List[DomainCandidate]] = {bucket: [] for bucket in wanted}
    seen = set()
    budget = config.HARVEST_ATTEMPT_FACTOR * count * len(wanted)
    attempts = 0

    def short() -> bool:
        return any(len(found[b]) < wanted[b] for b in wanted)

    async def lookup(address: str) -> Optional[DomainCandidate]:
        ptr = await transport.query(harvester, DnsQuestion(qname=reverse_name(address), qtype="PTR"))
        if not ptr.is_hit or not ptr.answer or ptr.answer in seen:
            return None
        seen.add(ptr.answer)
        a = await transport.query(harvester, DnsQuestion(qname=ptr.answer, qtype="A"))
        if not a.is_hit:
            return None
        return DomainCandidate(name=ptr.answer, qtype="A", authoritative_ttl=a.remaining_ttl, source_ip=address)

    while short() and attempts < budget:
        batch = [_random_global_address(rng) for _ in range(min(config.PARALLELISM, budget - attempts))]
        attempts += len(batch)
        for candidate in await bounded_gather((lookup(a) for a in batch), config.PARALLELISM):
            if candidate is None:
                continue
            bucket = found.get(candidate.authoritative_ttl)
            if bucket is not None and len(bucket) < wanted[candidate.authoritative_ttl]:
                bucket.append(candidate)

    for bucket in wanted:
        if len(found[bucket]) < wanted[bucket]:
            logger.warning("bucket %ds: harvested %d of %d domains", bucket, len(found[bucket]), wanted[bucket])
    return [candidate for bucket in wanted for candidate in found[bucket]]


def write_pool(path: str, pool: Iterable[DomainCandidate]) -> None:
    lines = [POOL_HEADER]
    for c in pool:
        lines.append(f"{c.name} {c.qtype} {c.authoritative_ttl} {c.source_ip or '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_pool(path: str) -> List[DomainCandidate]:
    pool = []
    for number, fields in _data_lines(path, POOL_HEADER):
        if len(fields) != 4:
            raise InputError(f"{path}:{number}: expected 4 fields")
        try:
            pool.append(
                DomainCandidate(
                    name=fields[0],
                    qtype=fields[1],
                    authoritative_ttl=int(fields[2]),
                    source_ip=None if fields[3] == "-" else fields[3],
                )
            )
        except ValueError as exc:
            raise InputError(f"{path}:{number}: {exc}") from exc
    return pool


def pool_buckets(pool: Sequence[DomainCandidate]) -> Dict[int, int]:
    counts: Dict[int, int] = {}
    for candidate in pool:
        counts[candidate.authoritative_ttl] = counts.get(candidate.authoritative_ttl, 0) + 1
    return dict(sorted(counts.items()))
