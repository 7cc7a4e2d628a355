from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple
from enum import Enum
from ipaddress import IPv4Address


# Enumerations
class QueryMode(str, Enum):
    RECURSIVE = "recursive"
    NON_RECURSIVE = "non_recursive"


class OutcomeKind(str, Enum):
    HIT = "hit"
    MISS = "miss"
    TIMEOUT = "timeout"
    REFUSED = "refused"


class BitState(str, Enum):
    ONE = "one"
    ZERO = "zero"
    ERASURE = "erasure"


class Classification(str, Enum):
    RELIABLE = "reliable"
    REJECTED = "rejected"


class Backend(str, Enum):
    REAL = "real"
    SIM = "sim"


# Network schemas
class ResolverEndpoint(BaseModel):
    address: IPv4Address
    port: int = Field(default=53, ge=1, le=65535)

    model_config = ConfigDict(frozen=True)

    def __str__(self) -> str:
        if self.port == 53:
            return str(self.address)
        return f"{self.address}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "ResolverEndpoint":
        """Parse `a.b.c.d` or `a.b.c.d:port`"""
        host, _, port = text.strip().partition(":")
        return cls(address=host, port=int(port) if port else 53)

    def sort_key(self) -> Tuple[int, int]:
        return int(self.address), self.port


class DnsQuestion(BaseModel):
    qname: str
    qtype: str = "A"
    mode: QueryMode = QueryMode.RECURSIVE

    model_config = ConfigDict(frozen=True)

    @field_validator("qname")
    @classmethod
    def _normalize_qname(cls, value: str) -> str:
        value = value.strip().rstrip(".").lower()
        if not value:
            raise ValueError("qname must not be empty")
        return value

    @field_validator("qtype")
    @classmethod
    def _normalize_qtype(cls, value: str) -> str:
        return value.strip().upper()


class QueryOutcome(BaseModel):
    kind: OutcomeKind
    remaining_ttl: Optional[int] = None
    rtt_ms: float = 0.0
    # first answer's rdata in text form (PTR target, A address); informational
    answer: Optional[str] = None

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _ttl_present_iff_hit(self) -> "QueryOutcome":
        if (self.kind == OutcomeKind.HIT) != (self.remaining_ttl is not None):
            raise ValueError("remaining_ttl is present exactly when the outcome is a hit")
        if self.remaining_ttl is not None and self.remaining_ttl < 0:
            raise ValueError("remaining_ttl must be non-negative")
        return self

    @property
    def is_hit(self) -> bool:
        return self.kind == OutcomeKind.HIT

    @property
    def is_erasure(self) -> bool:
        return self.kind in (OutcomeKind.TIMEOUT, OutcomeKind.REFUSED)

    @classmethod
    def hit(cls, remaining_ttl: int, rtt_ms: float = 0.0, answer: Optional[str] = None) -> "QueryOutcome":
        return cls(kind=OutcomeKind.HIT, remaining_ttl=remaining_ttl, rtt_ms=rtt_ms, answer=answer)

    @classmethod
    def miss(cls, rtt_ms: float = 0.0) -> "QueryOutcome":
        return cls(kind=OutcomeKind.MISS, rtt_ms=rtt_ms)

    @classmethod
    def timeout(cls, rtt_ms: float = 0.0) -> "QueryOutcome":
        return cls(kind=OutcomeKind.TIMEOUT, rtt_ms=rtt_ms)

    @classmethod
    def refused(cls, rtt_ms: float = 0.0) -> "QueryOutcome":
        return cls(kind=OutcomeKind.REFUSED, rtt_ms=rtt_ms)


# Protocol schemas
class BitCell(BaseModel):
    resolver: ResolverEndpoint
    domain: str
    expected_ttl: int = Field(gt=0)

    model_config = ConfigDict(frozen=True)


class BitReading(BaseModel):
    position: int = Field(ge=0)
    state: BitState
    remaining_ttl: Optional[int] = None

    model_config = ConfigDict(frozen=True)

    @property
    def bit(self) -> Optional[int]:
        if self.state == BitState.ERASURE:
            return None
        return 1 if self.state == BitState.ONE else 0


# Dataset schemas
class DomainCandidate(BaseModel):
    name: str
    qtype: str = "A"
    authoritative_ttl: int = Field(ge=0)
    source_ip: Optional[IPv4Address] = None

    model_config = ConfigDict(frozen=True)


class StageResult(BaseModel):
    stage: int
    name: str
    passed: bool
    evidence: List[Dict[str, Any]] = []


class ResolverAssessment(BaseModel):
    endpoint: ResolverEndpoint
    stage_results: List[StageResult] = []
    classification: Classification
    rejected_stage: Optional[int] = None
    reason: Optional[str] = None
    observed_ttl_skew: Optional[int] = None

    @property
    def is_reliable(self) -> bool:
        return self.classification == Classification.RELIABLE


# Analysis schemas
class AnalysisReport(BaseModel):
    quantity: str
    inputs: Dict[str, Any]
    value: float
    formula: str
    details: Dict[str, Any] = {}


# Simulator schemas
class LatencyModel(BaseModel):
    fixed_ms: float = Field(default=20.0, ge=0)
    mean_extra_ms: float = Field(default=30.0, ge=0)

    model_config = ConfigDict(frozen=True)


class BehaviorProfile(BaseModel):
    answers_recursive: bool = True
    caches: bool = True
    answers_nonrecursive: bool = True
    recursive_on_rd0: bool = False
    ttl_override: Optional[int] = Field(default=None, ge=0)
    flush_interval: int = Field(default=3600, gt=0)
    answer_loss_prob: float = Field(default=0.0, ge=0, le=1)
    latency: LatencyModel = LatencyModel()
    max_cache_entries: Optional[int] = Field(default=None, gt=0)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _rd0_needs_nonrecursive(self) -> "BehaviorProfile":
        if self.recursive_on_rd0 and not self.answers_nonrecursive:
            raise ValueError("recursive_on_rd0 requires answers_nonrecursive")
        return self


class ProfileShare(BaseModel):
    name: str
    fraction: float = Field(ge=0, le=1)
    profile: BehaviorProfile


class RestartSpec(BaseModel):
    resolver_index: int = Field(ge=0)
    at: float = Field(ge=0)


class UniverseSpec(BaseModel):
    resolvable_fraction: float = Field(default=0.6, gt=0, le=1)
    suffixes: Optional[List[str]] = None


class FilterPopulationSpec(BaseModel):
    candidates: int = Field(gt=0)
    pass_rates: Optional[List[float]] = None
    probe_ttl: int = Field(default=86400, gt=0)


class ExperimentSpec(BaseModel):
    ttl: int = Field(default=86400, gt=0)
    keys: int = Field(default=10, gt=0)
    message_bytes: int = Field(default=64, ge=0)
    sample_times: List[float] = [3600, 21600, 43200, 86040, 86401, 108000, 172800]


class Scenario(BaseModel):
    name: str = "scenario"
    seed: int = 0
    population: int = Field(default=1000, ge=0)
    start_time: float = Field(default=0.0, ge=0)
    latency_advances_clock: bool = False
    profiles: List[ProfileShare] = []
    restarts: List[RestartSpec] = []
    universe: UniverseSpec = UniverseSpec()
    pool_per_bucket: int = Field(default=400, ge=0)
    pool_buckets: List[int] = [86400]
    filter_population: Optional[FilterPopulationSpec] = None
    experiment: ExperimentSpec = ExperimentSpec()

    @model_validator(mode="after")
    def _fractions_fit(self) -> "Scenario":
        if sum(share.fraction for share in self.profiles) > 1 + 1e-9:
            raise ValueError("profile fractions sum to more than 1")
        return self


class CacheEntryState(BaseModel):
    name: str
    qtype: str
    value: str
    expiry: float


class FabricState(BaseModel):
    scenario: str
    seed: int
    now: float
    rng_state: List[Any]
    caches: Dict[str, List[CacheEntryState]] = {}


# CLI schemas
class CliConfig(BaseModel):
    command: Optional[str] = None
    backend: Backend = Backend.SIM
    scenario: Optional[str] = None
    seed: Optional[int] = None
    state: Optional[str] = None
    dataset: Optional[str] = None
    pool: Optional[str] = None
    parallelism: Optional[int] = Field(default=None, gt=0)
    timeout_ms: Optional[int] = Field(default=None, gt=0)
    prefetch: bool = True
    force: bool = False
    proxy: Optional[str] = None
    output: Optional[str] = None

    @model_validator(mode="after")
    def _backend_inputs(self) -> "CliConfig":
        if self.backend == Backend.SIM and self.scenario is None:
            raise ValueError("sim backend requires --scenario")
        if self.backend == Backend.REAL:
            if self.command == "encode" and not (self.dataset and self.pool):
                raise ValueError("the real backend requires --dataset and --pool")
            if self.command == "probe" and not self.pool:
                raise ValueError("probing the real network needs --pool for probe domains")
        return self
