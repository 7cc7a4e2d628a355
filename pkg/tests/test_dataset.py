import random

import pytest

from ephpub.exceptions import InputError
from ephpub.schemas import BehaviorProfile, Classification, DomainCandidate, ResolverAssessment, ResolverEndpoint
from ephpub.services.dataset import (
    SimSchedule,
    build_resolver_dataset,
    harvest_domains,
    load_assessments,
    load_blocklist,
    load_dataset,
    load_pool,
    persistence_delta,
    pool_buckets,
    probe_population,
    probe_resolver,
    stage_populations,
    write_dataset,
    write_pool,
)
from ephpub.services.simnet import HARVEST_RESOLVER, TTL_FREQUENCIES, SimTransport, filter_population
from tests.conftest import make_fabric

WRITTEN = "probe-written.pool.test"
FRESH = "probe-fresh.pool.test"


def probe_domains(fabric, ttl=86400):
    fabric.universe.add(WRITTEN, ttl)
    fabric.universe.add(FRESH, ttl)
    return [
        DomainCandidate(name=WRITTEN, authoritative_ttl=ttl),
        DomainCandidate(name=FRESH, authoritative_ttl=ttl),
    ]


def test_persistence_delta(config):
    assert persistence_delta(86400, config) == 4320
    assert persistence_delta(10, config) == 2


async def test_compliant_resolvers_are_reliable(config):
    fabric = make_fabric(population=20)
    assessments = await probe_population(
        SimTransport(fabric, config), fabric.population, probe_domains(fabric), SimSchedule(fabric), config
    )
    assert all(a.is_reliable for a in assessments)
    assert all(a.observed_ttl_skew == 0 for a in assessments)
    assert all(len(a.stage_results) == 4 for a in assessments)


@pytest.mark.parametrize(
    "profile,stage",
    [
        (BehaviorProfile(answer_loss_prob=1.0), 1),
        (BehaviorProfile(answers_recursive=False), 1),
        (BehaviorProfile(caches=False), 2),
        (BehaviorProfile(ttl_override=300), 3),
        (BehaviorProfile(recursive_on_rd0=True), 4),
    ],
)
async def test_misbehaviour_is_rejected_at_its_stage(config, profile, stage):
    fabric = make_fabric(population=1)
    endpoint = fabric.population[0]
    fabric.set_profile(endpoint, profile)
    assessment = await probe_resolver(
        SimTransport(fabric, config), endpoint, probe_domains(fabric), SimSchedule(fabric), config
    )
    assert assessment.classification == Classification.REJECTED
    assert assessment.rejected_stage == stage


async def test_unreachable_resolver_reason(config):
    fabric = make_fabric(population=1)
    fabric.set_profile(fabric.population[0], BehaviorProfile(answer_loss_prob=1.0))
    (assessment,) = await probe_population(
        SimTransport(fabric, config), fabric.population, probe_domains(fabric), SimSchedule(fabric), config
    )
    assert assessment.reason == "unreachable"


async def test_restart_during_the_probe_fails_persistence(config):
    fabric = make_fabric(population=1)
    endpoint = fabric.population[0]
    fabric.schedule_restart(endpoint, 43200)
    assessment = await probe_resolver(
        SimTransport(fabric, config), endpoint, probe_domains(fabric), SimSchedule(fabric), config
    )
    assert assessment.rejected_stage == 4
    assert assessment.reason == "entry lost before expiry"


async def test_stage_filter_matches_ground_truth(config):
    fabric = make_fabric(population=0, seed=900)
    truth = filter_population(fabric, 900)
    assessments = await probe_population(
        SimTransport(fabric, config), fabric.population, probe_domains(fabric), SimSchedule(fabric), config
    )
    assert stage_populations(assessments) == [900, 225, 130, 80, 22]
    assert all(a.rejected_stage == truth[a.endpoint] for a in assessments)


async def test_probing_needs_two_domains(config):
    fabric = make_fabric(population=1)
    with pytest.raises(InputError):
        await probe_population(
            SimTransport(fabric, config), fabric.population, probe_domains(fabric)[:1], SimSchedule(fabric), config
        )


# ========== DATASET FILES ==========

async def test_dataset_file_keeps_reliable_resolvers(tmp_path, config):
    fabric = make_fabric(population=10)
    fabric.set_profile(fabric.population[0], BehaviorProfile(caches=False))
    path = tmp_path / "resolvers.dataset"
    await build_resolver_dataset(
        SimTransport(fabric, config), fabric.population, probe_domains(fabric), SimSchedule(fabric), config,
        path=str(path),
    )
    reliable = load_dataset(str(path))
    assert len(reliable) == 9
    assert fabric.population[0] not in reliable
    assert len(load_assessments(str(path))) == 10


async def test_blocklisted_resolvers_are_never_probed(tmp_path, config):
    fabric = make_fabric(population=5)
    blocked = fabric.population[0]
    blocklist = tmp_path / "blocklist"
    blocklist.write_text(f"# operators who opted out\n{blocked}\n")
    assessments = await build_resolver_dataset(
        SimTransport(fabric, config), fabric.population, probe_domains(fabric), SimSchedule(fabric), config,
        blocklist=load_blocklist(str(blocklist)),
    )
    assert blocked not in {a.endpoint for a in assessments}
    assert all(e.endpoint != blocked for e in fabric.transcript)


async def test_refresh_merges_by_endpoint(tmp_path, config):
    fabric = make_fabric(population=2)
    first, second = fabric.population
    kept = ResolverEndpoint(address="198.51.100.7")
    path = tmp_path / "resolvers.dataset"
    write_dataset(str(path), [
        ResolverAssessment(endpoint=first, classification=Classification.REJECTED, rejected_stage=2),
        ResolverAssessment(endpoint=kept, classification=Classification.RELIABLE, observed_ttl_skew=0),
    ])
    await build_resolver_dataset(
        SimTransport(fabric, config), [first, second], probe_domains(fabric), SimSchedule(fabric), config,
        path=str(path), refresh=True,
    )
    assert set(load_dataset(str(path))) == {first, second, kept}


def test_dataset_file_errors(tmp_path):
    path = tmp_path / "bad.dataset"
    path.write_text("not a dataset\n")
    with pytest.raises(InputError):
        load_dataset(str(path))
    with pytest.raises(InputError):
        load_dataset(str(tmp_path / "missing.dataset"))
    path.write_text("# ephpub-dataset v1\n10.0.0.1 53 reliable\n")
    with pytest.raises(InputError):
        load_dataset(str(path))


# ========== DOMAIN POOL ==========

async def test_harvest_matches_buckets_exactly(config):
    fabric = make_fabric(population=0, seed=21)
    pool = await harvest_domains(
        SimTransport(fabric, config), HARVEST_RESOLVER, 30, [86400, 3600], random.Random(21), config,
    )
    assert pool_buckets(pool) == {3600: 30, 86400: 30}
    for candidate in pool:
        assert fabric.universe.lookup(candidate.name, "A")[1] == candidate.authoritative_ttl
    assert len({c.name for c in pool}) == 60


async def test_one_day_bucket_fills_first(config):
    fabric = make_fabric(population=0, seed=22)
    tight = config.model_copy(update={"HARVEST_ATTEMPT_FACTOR": 1})
    pool = await harvest_domains(
        SimTransport(fabric, tight), HARVEST_RESOLVER, 100, sorted(TTL_FREQUENCIES), random.Random(22), tight,
    )
    counts = pool_buckets(pool)
    assert max(counts, key=counts.get) == 86400


async def test_harvest_shortfall_is_not_an_error(config):
    fabric = make_fabric(population=0, seed=23)
    tight = config.model_copy(update={"HARVEST_ATTEMPT_FACTOR": 2})
    pool = await harvest_domains(SimTransport(fabric, tight), HARVEST_RESOLVER, 5, [10 ** 9], config=tight)
    assert pool == []
    assert await harvest_domains(SimTransport(fabric, tight), HARVEST_RESOLVER, 0, [86400], config=tight) == []


def test_pool_file(tmp_path):
    pool = [
        DomainCandidate(name="h000000000001.dsl.net", authoritative_ttl=86400, source_ip="192.0.2.1"),
        DomainCandidate(name="www.example.test", authoritative_ttl=3600),
    ]
    path = tmp_path / "domains.pool"
    write_pool(str(path), pool)
    assert load_pool(str(path)) == pool
    path.write_text("# something else\n")
    with pytest.raises(InputError):
        load_pool(str(path))


def test_pool_buckets_counts():
    pool = [DomainCandidate(name=f"n{i}", authoritative_ttl=t) for i, t in enumerate([60, 60, 3600])]
    assert pool_buckets(pool) == {60: 2, 3600: 1}
    assert pool_buckets([]) == {}
