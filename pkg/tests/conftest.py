import random
from pathlib import Path
from typing import List

import pytest

from ephpub.config import get_settings
from ephpub.schemas import DomainCandidate, Scenario
from ephpub.services.simnet import SimFabric, SimTransport

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def explicit_pool(fabric: SimFabric, count: int, ttl: int = 86400, prefix: str = "d") -> List[DomainCandidate]:
    """Register `count` names in the fabric's universe and return them as a pool"""
    pool = []
    for i in range(count):
        name = f"{prefix}{i:05d}.pool.test"
        fabric.universe.add(name, ttl)
        pool.append(DomainCandidate(name=name, authoritative_ttl=ttl))
    return pool


def make_fabric(population: int = 400, seed: int = 5, **extra) -> SimFabric:
    return SimFabric.from_scenario(Scenario(name="test", seed=seed, population=population, **extra))


@pytest.fixture
def config():
    return get_settings().model_copy(update={"PARALLELISM": 64, "DNS_RETRIES": 2})


@pytest.fixture
def fabric():
    return make_fabric()


@pytest.fixture
def transport(fabric, config):
    return SimTransport(fabric, config)


@pytest.fixture
def pool(fabric):
    return explicit_pool(fabric, 600)


@pytest.fixture
def rng():
    return random.Random(1234)
