"""End-to-end properties over larger simulated populations; run with `pytest -m slow`."""

import random
import statistics

import pytest

from ephpub.cli import run_experiment
from ephpub.exceptions import AuthFailure, DecodeFailure
from ephpub.schemas import BehaviorProfile, BitCell, BitState, DomainCandidate, QueryMode, ResolverEndpoint
from ephpub.services.dataset import SimSchedule, probe_population, stage_populations
from ephpub.services.epo_core import (
    EphemeralKey,
    epo_build,
    epo_parse,
    epo_serialize,
    generate_receiver_keypair,
    super_decrypt,
    super_encrypt,
)
from ephpub.services.keystore import (
    ProtocolStats,
    decode_message,
    encode_message,
    read_cells,
    recover_message,
    select_resolvers,
    ttl_skew_read,
)
from ephpub.services.rs6355 import SymbolReading, codec_for, rs_decode, rs_encode
from ephpub.services.simnet import (
    FILTER_PASS_RATES,
    SimFabric,
    SimTransport,
    crawl_adversary,
    flip_attack,
    load_scenario,
)
from tests.conftest import SCENARIOS, explicit_pool, make_fabric

pytestmark = pytest.mark.slow

MESSAGE = b"x" * 64


async def encode(fabric, pool, config, seed, key=None, stats=None):
    transport = SimTransport(fabric, config)
    epo = await encode_message(
        transport, fabric.population, pool, MESSAGE, 86400, config, random.Random(seed), stats, key
    )
    return transport, epo


def test_rs_boundary_sweep():
    rng = random.Random(2024)
    for _ in range(1000):
        key = [rng.getrandbits(1) for _ in range(128)]
        symbols = rs_encode(key).symbols
        for errors in range(5):
            erasures = 8 - 2 * errors
            positions = rng.sample(range(30), errors + erasures)
            readings = []
            for p, s in enumerate(symbols):
                if p in positions[errors:]:
                    readings.append(SymbolReading.erasure(p))
                elif p in positions[:errors]:
                    readings.append(SymbolReading(p, s ^ rng.randrange(1, 64)))
                else:
                    readings.append(SymbolReading(p, s))
            assert rs_decode(readings) == key, (errors, erasures)


@pytest.mark.parametrize("name,expiry", [("recovery_24h.json", 86400), ("recovery_7d.json", 604800)])
async def test_recovery_over_time(config, name, expiry):
    scenario = load_scenario(str(SCENARIOS / name))
    fabric = SimFabric.from_scenario(scenario)
    # large enough that two keys rarely share a (resolver, domain) cell
    pool = explicit_pool(fabric, 20000, ttl=expiry)
    experiment = scenario.experiment
    assert experiment.keys == 100
    result = await run_experiment(
        fabric, pool, config, experiment.keys, experiment.ttl,
        experiment.message_bytes, experiment.sample_times, scenario.seed,
    )
    assert 0.44 <= statistics.mean(result.zero_fractions) <= 0.56
    for sample in result.samples:
        if sample.offset < expiry - config.CLOCK_SKEW_SECONDS:
            assert sample.success == 1.0
            assert sample.agreement > 0.99
        elif sample.offset > expiry:
            assert sample.success == 0.0
            # only cells that were never written still agree
            assert sample.key_agreements == pytest.approx(result.zero_fractions, abs=1e-12)


async def test_churn_within_the_bound_is_corrected(config):
    for trial in range(200):
        fabric = make_fabric(population=400, seed=trial)
        pool = explicit_pool(fabric, 400)
        transport, epo = await encode(fabric, pool, config, trial)
        readings = await read_cells(transport, epo, range(128), config)
        ones = [epo.cells[r.position].resolver for r in readings if r.state == BitState.ONE]
        for endpoint in random.Random(trial).sample(ones, 4):
            fabric.schedule_restart(endpoint, fabric.now + 1)
        fabric.advance_time(2)
        assert await decode_message(transport, epo, config) == MESSAGE


async def test_nine_erased_symbols_never_yield_a_wrong_message(config):
    for trial in range(50):
        fabric = make_fabric(population=400, seed=1000 + trial)
        pool = explicit_pool(fabric, 400)
        transport, epo = await encode(fabric, pool, config, trial)
        symbols = random.Random(trial).sample(range(22), 9)
        for symbol in symbols:
            fabric.set_profile(epo.cells[symbol * 6].resolver, BehaviorProfile(answer_loss_prob=1.0))
        with pytest.raises(DecodeFailure):
            await decode_message(transport, epo, config)


async def test_parity_is_read_only_when_needed(config):
    for trial in range(20):
        fabric = make_fabric(population=400, seed=2000 + trial)
        pool = explicit_pool(fabric, 400)
        transport, epo = await encode(fabric, pool, config, trial)
        stats = ProtocolStats()
        assert await decode_message(transport, epo, config, stats=stats) == MESSAGE
        assert stats.reads == 128

        readings = await read_cells(transport, epo, range(128), config)
        one = next(epo.cells[r.position].resolver for r in readings if r.state == BitState.ONE)
        fabric.schedule_restart(one, fabric.now)
        stats = ProtocolStats()
        assert await decode_message(transport, epo, config, stats=stats) == MESSAGE
        assert stats.reads == 176


async def test_compromised_share_matches_the_crawled_fraction(config):
    fabric = make_fabric(population=25000, seed=77)
    rng = random.Random(77)
    shares = []
    for i in range(1000):
        resolvers = select_resolvers(fabric.population, 176, rng)
        cells = [BitCell(resolver=r, domain=f"c{i}-{j}.pool.test", expected_ttl=86400) for j, r in enumerate(resolvers)]
        shares.append(crawl_adversary(fabric, 0.10, epo_build(b"", cells, expiry=86400)))
    assert 0.09 <= statistics.mean(shares) <= 0.11


async def test_flip_attack_is_undone_by_ttl_skew(config):
    for trial in range(100):
        fabric = make_fabric(population=400, seed=3000 + trial)
        pool = explicit_pool(fabric, 400)
        transport, epo = await encode(fabric, pool, config, trial)
        flip_attack(fabric, epo, fabric.now + random.Random(trial).randrange(600, 43200))
        readings = await ttl_skew_read(transport, epo, config)
        assert recover_message(epo, readings, config) == MESSAGE


async def test_stage_filter_reproduces_pass_rates(config):
    fabric = SimFabric.from_scenario(load_scenario(str(SCENARIOS / "stage_filter.json")))
    fabric.universe.add("probe-written.pool.test", 86400)
    fabric.universe.add("probe-fresh.pool.test", 86400)
    probes = [
        DomainCandidate(name="probe-written.pool.test", authoritative_ttl=86400),
        DomainCandidate(name="probe-fresh.pool.test", authoritative_ttl=86400),
    ]
    assessments = await probe_population(
        SimTransport(fabric, config), fabric.population, probes, SimSchedule(fabric), config
    )
    populations = stage_populations(assessments)
    for stage, expected in enumerate(FILTER_PASS_RATES):
        assert populations[stage + 1] / populations[stage] == pytest.approx(expected, abs=0.02)


async def test_write_order_does_not_reveal_cell_positions(config):
    rng = random.Random(99)
    codec = codec_for(128)
    while True:
        a = [rng.getrandbits(1) for _ in range(128)]
        b = [rng.getrandbits(1) for _ in range(128)]
        if a != b and sum(codec.encode(a).to_bits()) == sum(codec.encode(b).to_bits()):
            break

    correlations = {0: [], 1: []}
    for run in range(200):
        label = run % 2
        fabric = make_fabric(population=400, seed=5000 + run)
        pool = explicit_pool(fabric, 400)
        key = EphemeralKey.from_bits(a if label == 0 else b)
        _, epo = await encode(fabric, pool, config, run, key=key)
        position = {(c.resolver, c.domain): i for i, c in enumerate(epo.cells)}
        order = [
            position[(e.endpoint, e.qname)]
            for e in fabric.transcript
            if e.mode == QueryMode.RECURSIVE and (e.endpoint, e.qname) in position
        ]
        correlations[label].append(statistics.correlation(range(len(order)), order))

    everything = correlations[0] + correlations[1]
    assert abs(statistics.mean(everything)) < 0.1

    observed = abs(statistics.mean(correlations[0]) - statistics.mean(correlations[1]))
    shuffler = random.Random(7)
    extreme = 0
    for _ in range(1000):
        shuffler.shuffle(everything)
        if abs(statistics.mean(everything[:100]) - statistics.mean(everything[100:])) >= observed:
            extreme += 1
    assert (extreme + 1) / 1001 > 0.01


async def test_expired_keys_read_as_all_zeros(config):
    for trial in range(100):
        fabric = make_fabric(population=400, seed=7000 + trial)
        pool = explicit_pool(fabric, 400)
        transport, epo = await encode(fabric, pool, config, trial)
        fabric.advance_to(epo.expiry + 1)
        with pytest.raises(DecodeFailure) as info:
            await decode_message(transport, epo, config, force=True)
        assert [r.state for r in info.value.readings] == [BitState.ZERO] * 176


def test_wrapped_epos_hide_every_cell():
    rng = random.Random(31)
    private_key, public_key = generate_receiver_keypair()
    outsider, _ = generate_receiver_keypair()
    for i in range(100):
        cells = [
            BitCell(
                resolver=ResolverEndpoint(address=f"10.{i}.{j // 200}.{j % 200}"),
                domain=f"w{rng.randrange(10 ** 12):012d}.isp.test",
                expected_ttl=86400,
            )
            for j in range(176)
        ]
        data = epo_serialize(epo_build(bytes(rng.getrandbits(8) for _ in range(64)), cells, expiry=86400))
        wrapped = super_encrypt(data, public_key)
        assert not [c for c in cells if c.domain.encode() in wrapped]
        with pytest.raises(AuthFailure):
            super_decrypt(wrapped, outsider)
        assert epo_parse(super_decrypt(wrapped, private_key)).cells == cells
