"""
Deterministic simulation of a population of caching DNS resolvers.

The fabric owns a virtual clock, a flat authoritative universe, and one
SimResolver per endpoint. SimTransport implements the transport contract on
top of it, so the keystore and the dataset builder run unchanged against
either backend. All randomness comes from generators seeded by the scenario.
"""

import bisect
import hashlib
import heapq
import itertools
import json
import logging
import math
import random
import re
from collections import OrderedDict
from dataclasses import dataclass
from ipaddress import IPv4Address
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from ephpub.config import Settings, settings
from ephpub.exceptions import ConfigurationError, InputError
from ephpub.schemas import (
    BehaviorProfile,
    CacheEntryState,
    DnsQuestion,
    FabricState,
    OutcomeKind,
    QueryMode,
    QueryOutcome,
    ResolverEndpoint,
    Scenario,
)

logger = logging.getLogger(__name__)

# Most frequent authoritative TTLs over two million random domains, with counts
TTL_FREQUENCIES: Dict[int, int] = {
    1200: 13595,
    1800: 7269,
    3600: 201789,
    7200: 171685,
    43200: 180144,
    86400: 998450,
    172800: 77326,
    259200: 12317,
    432000: 13450,
    604800: 42142,
}

DEFAULT_SUFFIXES = ("dsl.net", "isp.org", "adsl.fr", "cbl.com", "dyn.jp")

HARVEST_RESOLVER = ResolverEndpoint(address="10.53.0.1")
POPULATION_BASE = int(IPv4Address("20.0.0.0"))
POPULATION_SPAN = 1 << 24

FILTER_PASS_RATES = (225 / 900, 130 / 225, 80 / 130, 25 / 90)

_ARPA_SUFFIX = ".in-addr.arpa"
_HOST_RE = re.compile(r"^h(\d{12})\.(.+)$")

CacheKey = Tuple[str, str]


def _uniform(seed: int, *parts: object) -> float:
    """Pure function of (seed, parts) in [0, 1)"""
    text = "|".join([str(seed)] + [str(part) for part in parts])
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / float(1 << 64)


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)

    @property
    def now(self) -> float:
        return self._now

    def set(self, value: float) -> None:
        if value < self._now:
            raise InputError(f"virtual clock cannot move backwards ({value} < {self._now})")
        self._now = float(value)


class AuthoritativeUniverse:
    """
    Flat name -> (value, TTL) mapping.

    Explicitly added records take precedence. Otherwise reverse names of IPv4
    addresses resolve with probability `resolvable_fraction`, to hostnames
    that resolve back (type A) with a TTL drawn from TTL_FREQUENCIES.
    """

    def __init__(
        self,
        seed: int = 0,
        resolvable_fraction: float = 0.6,
        suffixes: Optional[Sequence[str]] = None,
        ttl_weights: Optional[Dict[int, int]] = None,
    ):
        if not 0 < resolvable_fraction <= 1:
            raise InputError("resolvable_fraction must be in (0, 1]")
        self.seed = seed
        self.resolvable_fraction = resolvable_fraction
        self.suffixes = tuple(suffixes or DEFAULT_SUFFIXES)
        weights = ttl_weights or TTL_FREQUENCIES
        self._ttls = sorted(weights)
        total = float(sum(weights.values()))
        running = 0.0
        self._cumulative: List[float] = []
        for ttl in self._ttls:
            running += weights[ttl] / total
            self._cumulative.append(running)
        self.records: Dict[CacheKey, Tuple[str, int]] = {}

    def add(self, name: str, ttl: int, qtype: str = "A", value: Optional[str] = None) -> None:
        if ttl < 0:
            raise InputError("TTL must be non-negative")
        key = (name.strip().rstrip(".").lower(), qtype.upper())
        self.records[key] = (value or "192.0.2.1", int(ttl))

    def lookup(self, name: str, qtype: str = "A") -> Optional[Tuple[str, int]]:
        name = name.rstrip(".").lower()
        qtype = qtype.upper()
        record = self.records.get((name, qtype))
        if record is not None:
            return record
        if qtype == "PTR" and name.endswith(_ARPA_SUFFIX):
            return self._synthetic_ptr(name)
        if qtype == "A":
            return self._synthetic_a(name)
        return None

    def is_resolvable(self, ip: int) -> bool:
        return _uniform(self.seed, "ptr", ip) < self.resolvable_fraction

    def hostname_for(self, ip: int) -> str:
        suffix = self.suffixes[int(_uniform(self.seed, "suffix", ip) * len(self.suffixes))]
        return f"h{ip:012d}.{suffix}"

    def ttl_for(self, name: str) -> int:
        index = bisect.bisect_right(self._cumulative, _uniform(self.seed, "ttl", name))
        return self._ttls[min(index, len(self._ttls) - 1)]

    def _synthetic_ptr(self, name: str) -> Optional[Tuple[str, int]]:
        labels = name[: -len(_ARPA_SUFFIX)].split(".")
        if len(labels) != 4 or not all(label.isdigit() and int(label) < 256 for label in labels):
            return None
        ip = int(IPv4Address(".".join(reversed(labels))))
        if not self.is_resolvable(ip):
            return None
        return self.hostname_for(ip), self.ttl_for(name)

    def _synthetic_a(self, name: str) -> Optional[Tuple[str, int]]:
        match = _HOST_RE.match(name)
        if not match:
            return None
        ip = int(match.group(1))
        if ip >= 1 << 32 or not self.is_resolvable(ip) or self.hostname_for(ip) != name:
            return None
        return str(IPv4Address(ip)), self.ttl_for(name)


class SimResolver:
    def __init__(self, endpoint: ResolverEndpoint, profile: Optional[BehaviorProfile] = None):
        self.endpoint = endpoint
        self.profile = profile or BehaviorProfile()
        self.cache: "OrderedDict[CacheKey, Tuple[str, float]]" = OrderedDict()
        self.restart_schedule: List[float] = []

    def restart(self) -> None:
        self.cache.clear()

    def purge(self, until: float) -> int:
        """Physically remove entries with expiry <= until"""
        expired = [key for key, (_, expiry) in self.cache.items() if expiry <= until]
        for key in expired:
            del self.cache[key]
        return len(expired)

    def insert(self, key: CacheKey, value: str, expiry: float) -> None:
        self.cache[key] = (value, expiry)
        self.cache.move_to_end(key)
        limit = self.profile.max_cache_entries
        while limit is not None and len(self.cache) > limit:
            self.cache.popitem(last=False)

    @property
    def cache_size(self) -> int:
        return len(self.cache)


def sim_query(
    res: SimResolver,
    q: DnsQuestion,
    now: float,
    universe: AuthoritativeUniverse,
    rng: random.Random,
) -> QueryOutcome:
    """One attempt against one simulated resolver"""
    profile = res.profile
    if profile.answer_loss_prob and rng.random() < profile.answer_loss_prob:
        return QueryOutcome.timeout()
    rtt_ms = profile.latency.fixed_ms
    if profile.latency.mean_extra_ms > 0:
        rtt_ms += rng.expovariate(1.0 / profile.latency.mean_extra_ms)

    recursive = q.mode == QueryMode.RECURSIVE
    if recursive and not profile.answers_recursive:
        return QueryOutcome.refused(rtt_ms)
    if not recursive:
        if not profile.answers_nonrecursive:
            return QueryOutcome.refused(rtt_ms)
        recursive = profile.recursive_on_rd0

    key = (q.qname, q.qtype)
    entry = res.cache.get(key)
    if entry is not None:
        value, expiry = entry
        if expiry > now:
            res.cache.move_to_end(key)
            return QueryOutcome.hit(int(expiry - now), rtt_ms, value)
        del res.cache[key]

    if not recursive:
        return QueryOutcome.miss(rtt_ms)
    record = universe.lookup(q.qname, q.qtype)
    if record is None:
        return QueryOutcome.miss(rtt_ms)
    value, ttl = record
    if profile.ttl_override is not None:
        ttl = profile.ttl_override
    if profile.caches and ttl > 0:
        res.insert(key, value, now + ttl)
    return QueryOutcome.hit(ttl, rtt_ms, value)


@dataclass(frozen=True)
class TranscriptEntry:
    seq: int
    time: float
    endpoint: ResolverEndpoint
    qname: str
    qtype: str
    mode: QueryMode
    kind: OutcomeKind
    attempts: int


class SimFabric:
    def __init__(
        self,
        universe: Optional[AuthoritativeUniverse] = None,
        seed: int = 0,
        start_time: float = 0.0,
        name: str = "scenario",
        latency_advances_clock: bool = False,
    ):
        self.name = name
        self.seed = seed
        # each attempt moves the clock by its rtt, or by the timeout when lost
        self.latency_advances_clock = latency_advances_clock
        self.universe = universe or AuthoritativeUniverse(seed)
        self.clock = VirtualClock(start_time)
        self.rng = random.Random(seed)
        self.resolvers: Dict[ResolverEndpoint, SimResolver] = {}
        # scenario resolvers in creation order; the harvest resolver is not part of it
        self.population: List[ResolverEndpoint] = []
        self.compromised: Set[ResolverEndpoint] = set()
        self.transcript: List[TranscriptEntry] = []
        self._events: List[Tuple[float, int, ResolverEndpoint]] = []
        self._event_seq = itertools.count()
        self._occupied: Set[ResolverEndpoint] = set()
        self._used_offsets: Set[int] = set()
        self._address_rng = random.Random(f"{seed}:addresses")

    @property
    def now(self) -> float:
        return self.clock.now

    # ========== POPULATION ==========

    def add_resolver(
        self,
        endpoint: ResolverEndpoint,
        profile: Optional[BehaviorProfile] = None,
        restarts: Iterable[float] = (),
        in_population: bool = True,
    ) -> SimResolver:
        if endpoint in self.resolvers:
            raise InputError(f"resolver {endpoint} already exists")
        resolver = SimResolver(endpoint, profile)
        self.resolvers[endpoint] = resolver
        if in_population:
            self.population.append(endpoint)
        for at in restarts:
            self.schedule_restart(endpoint, at)
        return resolver

    def allocate_endpoints(self, count: int) -> List[ResolverEndpoint]:
        """Fresh, distinct addresses drawn from the population range"""
        if len(self._used_offsets) + count > POPULATION_SPAN:
            raise InputError("population address range exhausted")
        endpoints = []
        while len(endpoints) < count:
            offset = self._address_rng.randrange(POPULATION_SPAN)
            if offset in self._used_offsets:
                continue
            self._used_offsets.add(offset)
            endpoints.append(ResolverEndpoint(address=IPv4Address(POPULATION_BASE + offset)))
        return endpoints

    def set_profile(self, endpoint: ResolverEndpoint, profile: BehaviorProfile) -> None:
        self._resolver(endpoint).profile = profile

    def schedule_restart(self, endpoint: ResolverEndpoint, at: float) -> None:
        resolver = self._resolver(endpoint)
        resolver.restart_schedule.append(at)
        if at <= self.now:
            resolver.restart()
            self._occupied.discard(endpoint)
            return
        heapq.heappush(self._events, (at, next(self._event_seq), endpoint))

    def cache_size(self, endpoint: ResolverEndpoint) -> int:
        return self._resolver(endpoint).cache_size

    def _resolver(self, endpoint: ResolverEndpoint) -> SimResolver:
        try:
            return self.resolvers[endpoint]
        except KeyError:
            raise InputError(f"unknown resolver {endpoint}")

    # ========== QUERIES ==========

    def sim_query(self, endpoint: ResolverEndpoint, q: DnsQuestion) -> QueryOutcome:
        resolver = self.resolvers.get(endpoint)
        if resolver is None:
            return QueryOutcome.timeout()
        outcome = sim_query(resolver, q, self.now, self.universe, self.rng)
        if resolver.cache:
            self._occupied.add(endpoint)
        return outcome

    def query(
        self,
        endpoint: ResolverEndpoint,
        q: DnsQuestion,
        attempts: int = 1,
        timeout_s: float = 2.0,
    ) -> QueryOutcome:
        """Up to `attempts` tries; one transcript entry per call"""
        outcome = QueryOutcome.timeout()
        issued = self.now
        used = 0
        for _ in range(max(1, attempts)):
            used += 1
            outcome = self.sim_query(endpoint, q)
            if self.latency_advances_clock:
                lost = outcome.kind == OutcomeKind.TIMEOUT
                self.advance_time(timeout_s if lost else outcome.rtt_ms / 1000.0)
            if outcome.kind != OutcomeKind.TIMEOUT:
                break
        self.transcript.append(
            TranscriptEntry(
                seq=len(self.transcript),
                time=issued,
                endpoint=endpoint,
                qname=q.qname,
                qtype=q.qtype,
                mode=q.mode,
                kind=outcome.kind,
                attempts=used,
            )
        )
        return outcome

    # ========== TIME ==========

    def advance_time(self, dt: float) -> None:
        if dt < 0:
            raise InputError(f"cannot advance time by a negative amount ({dt})")
        if dt == 0:
            return
        old = self.now
        new = old + dt
        while self._events and self._events[0][0] <= new:
            at, _, endpoint = heapq.heappop(self._events)
            self.clock.set(max(at, self.now))
            self.resolvers[endpoint].restart()
            self._occupied.discard(endpoint)
            logger.debug("restart of %s at %.0f", endpoint, at)
        self.clock.set(new)
        self._flush(old, new)

    def advance_to(self, when: float) -> None:
        self.advance_time(max(0.0, when - self.now))

    def _flush(self, old: float, new: float) -> None:
        for endpoint in list(self._occupied):
            resolver = self.resolvers[endpoint]
            interval = resolver.profile.flush_interval
            boundary = math.floor(new / interval) * interval
            if boundary > old:
                resolver.purge(boundary)
            if not resolver.cache:
                self._occupied.discard(endpoint)

    # ========== PERSISTENCE ==========

    def snapshot(self) -> FabricState:
        version, internal, gauss = self.rng.getstate()
        caches = {
            str(endpoint): [
                CacheEntryState(name=name, qtype=qtype, value=value, expiry=expiry)
                for (name, qtype), (value, expiry) in resolver.cache.items()
            ]
            for endpoint, resolver in self.resolvers.items()
            if resolver.cache
        }
        return FabricState(
            scenario=self.name,
            seed=self.seed,
            now=self.now,
            rng_state=[version, list(internal), gauss],
            caches=caches,
        )

    def restore(self, state: FabricState) -> None:
        if state.scenario != self.name or state.seed != self.seed:
            raise ConfigurationError(
                f"state belongs to scenario {state.scenario!r} seed {state.seed}, "
                f"not {self.name!r} seed {self.seed}"
            )
        # events up to the saved time already happened; the saved caches reflect them
        while self._events and self._events[0][0] <= state.now:
            heapq.heappop(self._events)
        self.clock.set(state.now)
        version, internal, gauss = state.rng_state
        self.rng.setstate((version, tuple(internal), gauss))
        self._occupied.clear()
        for resolver in self.resolvers.values():
            resolver.cache.clear()
        for text, entries in state.caches.items():
            resolver = self._resolver(ResolverEndpoint.parse(text))
            for entry in entries:
                resolver.cache[(entry.name, entry.qtype)] = (entry.value, entry.expiry)
            if resolver.cache:
                self._occupied.add(resolver.endpoint)

    def save_state(self, path: str) -> None:
        Path(path).write_text(self.snapshot().model_dump_json())

    def load_state(self, path: str) -> bool:
        """Restore from `path` if it exists"""
        state_path = Path(path)
        if not state_path.exists():
            return False
        self.restore(FabricState.model_validate_json(state_path.read_text()))
        return True

    # ========== SCENARIOS ==========

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "SimFabric":
        universe = AuthoritativeUniverse(
            scenario.seed,
            scenario.universe.resolvable_fraction,
            scenario.universe.suffixes,
        )
        fabric = cls(
            universe, scenario.seed, scenario.start_time, scenario.name, scenario.latency_advances_clock
        )
        fabric.add_resolver(HARVEST_RESOLVER, BehaviorProfile(), in_population=False)

        endpoints = fabric.allocate_endpoints(scenario.population)
        profiles: List[BehaviorProfile] = []
        for share in scenario.profiles:
            profiles.extend([share.profile] * int(round(share.fraction * scenario.population)))
        profiles = profiles[: scenario.population]
        profiles.extend([BehaviorProfile()] * (scenario.population - len(profiles)))
        random.Random(f"{scenario.seed}:profiles").shuffle(profiles)
        for endpoint, profile in zip(endpoints, profiles):
            fabric.add_resolver(endpoint, profile)

        for restart in scenario.restarts:
            if restart.resolver_index >= len(endpoints):
                raise ConfigurationError(f"restart refers to resolver {restart.resolver_index} of {len(endpoints)}")
            fabric.schedule_restart(endpoints[restart.resolver_index], scenario.start_time + restart.at)

        if scenario.filter_population is not None:
            filter_population(
                fabric,
                scenario.filter_population.candidates,
                scenario.filter_population.pass_rates or FILTER_PASS_RATES,
                scenario.filter_population.probe_ttl,
            )
        logger.info("scenario %s: %d resolvers, seed %d", scenario.name, len(fabric.population), scenario.seed)
        return fabric


def load_scenario(path: str) -> Scenario:
    scenario_path = Path(path)
    if not scenario_path.exists():
        raise ConfigurationError(f"scenario file {path} not found")
    try:
        return Scenario.model_validate_json(scenario_path.read_text())
    except ValueError as exc:
        raise ConfigurationError(f"invalid scenario {path}: {exc}") from exc


class SimTransport:
    """Transport contract over a SimFabric; queries are serialized in virtual time"""

    def __init__(self, fabric: SimFabric, config: Optional[Settings] = None):
        config = config or settings
        self.fabric = fabric
        self.retries = config.DNS_RETRIES
        self.timeout_s = config.timeout_seconds

    def now(self) -> float:
        return self.fabric.now

    async def query(
        self,
        res: ResolverEndpoint,
        q: DnsQuestion,
        timeout_ms: Optional[int] = None,
    ) -> QueryOutcome:
        timeout_s = self.timeout_s if timeout_ms is None else timeout_ms / 1000.0
        return self.fabric.query(res, q, attempts=self.retries + 1, timeout_s=timeout_s)


# ========== ADVERSARIES AND POPULATIONS ==========

def crawl_adversary(fabric: SimFabric, compromised_fraction: float, epo) -> float:
    """Mark a uniform random share of resolvers compromised; return the share of EPO cells they hold"""
    if not 0 <= compromised_fraction <= 1:
        raise InputError("compromised fraction must be within [0, 1]")
    population = fabric.population or list(fabric.resolvers)
    count = int(round(compromised_fraction * len(population)))
    fabric.compromised = set(fabric.rng.sample(population, count))
    if not epo.cells:
        return 0.0
    held = sum(1 for cell in epo.cells if cell.resolver in fabric.compromised)
    return held / len(epo.cells)


def flip_attack(fabric: SimFabric, epo, attack_time: float, qtype: str = "A") -> None:
    """Recursive query of every cell, turning all of them into cache hits"""
    if attack_time > epo.expiry:
        logger.info("flip attack at %.0f is after expiry %d", attack_time, epo.expiry)
    fabric.advance_to(attack_time)
    for cell in epo.cells:
        fabric.query(cell.resolver, DnsQuestion(qname=cell.domain, qtype=qtype, mode=QueryMode.RECURSIVE))


def cache_flood(fabric: SimFabric, endpoint: ResolverEndpoint, count: int, ttl: int = 86400) -> int:
    """Push `count` unrelated entries into a resolver's cache; returns the resulting cache size"""
    resolver = fabric._resolver(endpoint)
    for i in range(count):
        resolver.insert((f"flood{i}.invalid", "A"), "192.0.2.255", fabric.now + ttl)
    if resolver.cache:
        fabric._occupied.add(endpoint)
    return resolver.cache_size


def filter_population(
    fabric: SimFabric,
    count: int,
    pass_rates: Sequence[float] = FILTER_PASS_RATES,
    probe_ttl: int = 86400,
) -> Dict[ResolverEndpoint, Optional[int]]:
    """
    Add `count` candidates whose misbehaviour makes them fail the stage-by-stage
    filter at the given pass rates. Returns the stage each one should fail at,
    None for resolvers that should be classified reliable. Stage-4 failures
    restart half-way through the probe TTL or answer RD=0 queries recursively.
    """
    if len(pass_rates) != 4 or not all(0 <= rate <= 1 for rate in pass_rates):
        raise InputError("expected four pass rates within [0, 1]")
    stages: List[Optional[int]] = []
    remaining = count
    for stage, rate in enumerate(pass_rates, 1):
        passed = int(round(remaining * rate))
        stages.extend([stage] * (remaining - passed))
        remaining = passed
    stages.extend([None] * remaining)
    random.Random(f"{fabric.seed}:filter").shuffle(stages)

    truth: Dict[ResolverEndpoint, Optional[int]] = {}
    stage4_seen = 0
    for endpoint, stage in zip(fabric.allocate_endpoints(count), stages):
        restarts: List[float] = []
        if stage == 1:
            profile = BehaviorProfile(answer_loss_prob=1.0)
        elif stage == 2:
            profile = BehaviorProfile(caches=False)
        elif stage == 3:
            profile = BehaviorProfile(ttl_override=max(1, probe_ttl // 288))
        elif stage == 4:
            if stage4_seen % 2 == 0:
                profile = BehaviorProfile()
                restarts.append(fabric.now + probe_ttl / 2)
            else:
                profile = BehaviorProfile(recursive_on_rd0=True)
            stage4_seen += 1
        else:
            profile = BehaviorProfile()
        fabric.add_resolver(endpoint, profile, restarts)
        truth[endpoint] = stage
    return truth


def write_transcript(fabric: SimFabric, path: str) -> None:
    with open(path, "w") as handle:
        for entry in fabric.transcript:
            handle.write(
                json.dumps(
                    {
                        "seq": entry.seq,
                        "time": entry.time,
                        "endpoint": str(entry.endpoint),
                        "qname": entry.qname,
                        "qtype": entry.qtype,
                        "mode": entry.mode.value,
                        "kind": entry.kind.value,
                        "attempts": entry.attempts,
                    }
                )
                + "\n"
            )
