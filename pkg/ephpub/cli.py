"""
Command-line frontend.

Exit codes: 0 success, 1 unexpected error, 2 encode failure, 3 expired,
4 decode or parse failure, 5 usage, input or configuration error,
6 ambiguous TTL skew.
"""

import argparse
import asyncio
import logging
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from ephpub.config import Settings, get_settings
from ephpub.exceptions import (
    AmbiguousSkew,
    AuthFailure,
    ConfigurationError,
    DecodeFailure,
    DomainError,
    EncodeFailure,
    EphPubError,
    Expired,
    InputError,
    InsufficientDomains,
    ParseError,
    WriteFailure,
)
from ephpub.schemas import Backend, BitState, CliConfig, DomainCandidate, ResolverEndpoint, Scenario
from ephpub.services import analysis
from ephpub.services.dataset import (
    SimSchedule,
    WallClockSchedule,
    build_resolver_dataset,
    harvest_domains,
    load_blocklist,
    load_dataset,
    load_pool,
    pool_buckets,
    stage_populations,
    write_pool,
)
from ephpub.services.epo_core import (
    EphemeralKey,
    epo_parse,
    epo_serialize,
    generate_receiver_keypair,
    is_wrapped,
    load_private_key,
    load_public_key,
    private_key_to_pem,
    public_key_to_pem,
    render_epo,
    super_decrypt,
    super_encrypt,
)
from ephpub.services.keystore import (
    ProtocolStats,
    decode_message,
    encode_message,
    read_cells,
    recover_message,
    ttl_skew_read,
)
from ephpub.services.rs6355 import codec_for
from ephpub.services.simnet import (
    HARVEST_RESOLVER,
    AuthoritativeUniverse,
    SimFabric,
    SimTransport,
    load_scenario,
)
from ephpub.services.transport import Transport, UdpTransport
from ephpub.utils.helpers import format_duration, format_table, hamming_weight, parse_duration

logger = logging.getLogger("ephpub")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_ENCODE = 2
EXIT_EXPIRED = 3
EXIT_DECODE = 4
EXIT_USAGE = 5
EXIT_SKEW = 6

_EXIT_CODES = (
    (Expired, EXIT_EXPIRED),
    (AmbiguousSkew, EXIT_SKEW),
    ((EncodeFailure, InsufficientDomains, WriteFailure), EXIT_ENCODE),
    ((DecodeFailure, ParseError, AuthFailure), EXIT_DECODE),
    ((InputError, ConfigurationError, DomainError), EXIT_USAGE),
)

PROBE_WRITTEN = "probe-written.ephpub.test"
PROBE_FRESH = "probe-fresh.ephpub.test"


def exit_code_for(exc: BaseException) -> int:
    for kinds, code in _EXIT_CODES:
        if isinstance(exc, kinds):
            return code
    return EXIT_UNEXPECTED


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise InputError(message)


# ========== BACKENDS ==========

@dataclass
class Runtime:
    cli: CliConfig
    config: Settings
    transport: Transport
    scenario: Optional[Scenario] = None
    fabric: Optional[SimFabric] = None
    state_path: Optional[str] = None

    @property
    def is_sim(self) -> bool:
        return self.fabric is not None

    def rng(self) -> Optional[random.Random]:
        """Generator derived from the persisted fabric state under simulation, None otherwise"""
        if not self.is_sim:
            return None
        return random.Random(self.fabric.rng.getrandbits(64))

    def save(self) -> None:
        if self.fabric is not None and self.state_path:
            self.fabric.save_state(self.state_path)


def _cli_config(args: argparse.Namespace) -> CliConfig:
    try:
        return CliConfig(
            command=args.command,
            backend=args.backend,
            scenario=args.scenario,
            seed=args.seed,
            state=args.state,
            dataset=args.dataset,
            pool=args.pool,
            parallelism=args.threads,
            timeout_ms=args.timeout,
            prefetch=not args.no_prefetch,
            force=args.force,
            proxy=args.proxy,
        )
    except ValidationError as exc:
        raise InputError("; ".join(error["msg"].removeprefix("Value error, ") for error in exc.errors()))


def _settings(args: argparse.Namespace, cli: CliConfig) -> Settings:
    update = {"PREFETCH": cli.prefetch and get_settings().PREFETCH}
    if cli.parallelism:
        update["PARALLELISM"] = cli.parallelism
    if cli.timeout_ms:
        update["DNS_TIMEOUT_MS"] = cli.timeout_ms
    if args.retries is not None:
        update["DNS_RETRIES"] = args.retries
    if args.key_bits is not None:
        if args.key_bits not in (128, 134):
            raise ConfigurationError("--key-bits must be 128 or 134")
        update["KEY_BITS"] = args.key_bits
    if cli.proxy:
        update["PROXY_ADDRESS"] = cli.proxy
    return get_settings().model_copy(update=update)


def build_runtime(args: argparse.Namespace, persistent: bool = True) -> Runtime:
    cli = _cli_config(args)
    config = _settings(args, cli)
    if cli.backend == Backend.REAL:
        if not args.i_understand_network_effects:
            raise ConfigurationError(
                "the real backend sends traffic to third-party resolvers; "
                "pass --i-understand-network-effects to proceed"
            )
        logger.warning("using the real network backend")
        return Runtime(cli=cli, config=config, transport=UdpTransport(config))

    scenario = load_scenario(cli.scenario)
    if cli.seed is not None:
        scenario = scenario.model_copy(update={"seed": cli.seed})
    fabric = SimFabric.from_scenario(scenario)
    state_path = None
    if persistent:
        state_path = cli.state or str(Path(cli.scenario).with_suffix("")) + ".state.json"
        if fabric.load_state(state_path):
            logger.info("restored simulator state from %s (t=%.0f)", state_path, fabric.now)
    if args.advance:
        fabric.advance_time(parse_duration(args.advance))
    return Runtime(
        cli=cli,
        config=config,
        transport=SimTransport(fabric, config),
        scenario=scenario,
        fabric=fabric,
        state_path=state_path,
    )


async def sim_pool(scenario: Scenario, config: Settings) -> List[DomainCandidate]:
    """Harvest the scenario's domain pool on a separate fabric holding only the harvest resolver"""
    universe = AuthoritativeUniverse(
        scenario.seed, scenario.universe.resolvable_fraction, scenario.universe.suffixes
    )
    fabric = SimFabric(universe, scenario.seed, scenario.start_time, scenario.name)
    fabric.add_resolver(HARVEST_RESOLVER, in_population=False)
    return await harvest_domains(
        SimTransport(fabric, config),
        HARVEST_RESOLVER,
        scenario.pool_per_bucket,
        scenario.pool_buckets,
        random.Random(f"{scenario.seed}:harvest"),
        config,
    )


async def _inputs(runtime: Runtime) -> Tuple[List[ResolverEndpoint], List[DomainCandidate]]:
    cli = runtime.cli
    dataset = load_dataset(cli.dataset) if cli.dataset else list(runtime.fabric.population)
    if cli.pool:
        pool = load_pool(cli.pool)
    else:
        pool = await sim_pool(runtime.scenario, runtime.config)
    return dataset, pool


def _read_epo(path: str, identity: Optional[str]):
    data = Path(path).read_bytes()
    if is_wrapped(data):
        if not identity:
            raise InputError(f"{path} is wrapped for a recipient; pass --identity")
        data = super_decrypt(data, load_private_key(Path(identity).read_bytes()))
    return epo_parse(data)


# ========== COMMANDS ==========

def cmd_encode(args: argparse.Namespace) -> int:
    runtime = build_runtime(args)
    message = Path(args.input).read_bytes()
    ttl = parse_duration(args.ttl)
    stats = ProtocolStats()

    async def run():
        dataset, pool = await _inputs(runtime)
        return await encode_message(
            runtime.transport, dataset, pool, message, ttl, runtime.config, runtime.rng(), stats
        )

    epo = asyncio.run(run())
    data = epo_serialize(epo)
    if args.recipient:
        data = super_encrypt(data, load_public_key(Path(args.recipient).read_bytes()))
    output = args.output or args.input + ".epo"
    Path(output).write_bytes(data)
    runtime.save()

    print(format_table(
        ["metric", "value"],
        [
            ("output", output),
            ("bytes", len(data)),
            ("cells", len(epo.cells)),
            ("expiry", epo.expiry),
            ("ttl", format_duration(ttl)),
            ("prechecks", stats.prechecks),
            ("discarded", stats.discarded_candidates),
            ("prefetches", stats.prefetches),
            ("writes", stats.writes),
            ("replans", stats.replans),
            ("resolver_swaps", stats.resolver_swaps),
        ],
    ))
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    runtime = build_runtime(args)
    epo = _read_epo(args.input, args.identity)
    stats = ProtocolStats()

    async def run() -> bytes:
        if args.ttl_skew:
            readings = await ttl_skew_read(runtime.transport, epo, runtime.config, stats)
            return recover_message(epo, readings, runtime.config)
        return await decode_message(runtime.transport, epo, runtime.config, runtime.cli.force, stats)

    try:
        message = asyncio.run(run())
    finally:
        runtime.save()
    if args.output:
        output = args.output
    elif args.input.endswith(".epo"):
        output = args.input[: -len(".epo")]
    else:
        output = args.input + ".out"
    Path(output).write_bytes(message)
    print(format_table(
        ["metric", "value"],
        [("output", output), ("reads", stats.reads), ("parity_fetched", int(stats.parity_fetched))],
    ))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    print(render_epo(_read_epo(args.input, args.identity)))
    return EXIT_OK


def cmd_keygen(args: argparse.Namespace) -> int:
    private_key, public_key = generate_receiver_keypair()
    key_path, pub_path = Path(args.prefix + ".key"), Path(args.prefix + ".pub")
    key_path.write_bytes(private_key_to_pem(private_key))
    key_path.chmod(0o600)
    pub_path.write_bytes(public_key_to_pem(public_key))
    print(format_table(["file", "kind"], [(str(key_path), "private"), (str(pub_path), "public")]))
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    runtime = build_runtime(args, persistent=False)
    probe_ttl = parse_duration(args.probe_ttl)
    blocklist = load_blocklist(args.blocklist) if args.blocklist else []

    if runtime.is_sim:
        universe = runtime.fabric.universe
        universe.add(PROBE_WRITTEN, probe_ttl)
        universe.add(PROBE_FRESH, probe_ttl)
        probes = [
            DomainCandidate(name=PROBE_WRITTEN, authoritative_ttl=probe_ttl),
            DomainCandidate(name=PROBE_FRESH, authoritative_ttl=probe_ttl),
        ]
        schedule = SimSchedule(runtime.fabric)
    else:
        probes = [c for c in load_pool(runtime.cli.pool) if c.authoritative_ttl == probe_ttl][:2]
        if len(probes) < 2:
            raise InputError(f"the pool holds fewer than two domains with TTL {probe_ttl}s")
        schedule = WallClockSchedule()

    if args.candidates:
        candidates = [
            ResolverEndpoint.parse(line)
            for line in Path(args.candidates).read_text().splitlines()
            if line.strip() and not line.startswith("#")
        ]
    elif runtime.is_sim:
        candidates = list(runtime.fabric.population)
    else:
        raise InputError("the real backend requires --candidates")

    assessments = asyncio.run(build_resolver_dataset(
        runtime.transport, candidates, probes, schedule, runtime.config,
        blocklist=blocklist, path=args.output, refresh=args.refresh,
    ))
    populations = stage_populations(assessments)
    rows = [(0, "candidates", populations[0], 1.0)]
    names = ["recursive answer", "caching", "ttl fidelity", "persistence"]
    for stage in range(1, 5):
        entering = populations[stage - 1]
        rows.append((stage, names[stage - 1], populations[stage], populations[stage] / entering if entering else 0.0))
    print(format_table(["stage", "name", "survivors", "ratio"], rows))
    return EXIT_OK


def cmd_harvest(args: argparse.Namespace) -> int:
    runtime = build_runtime(args, persistent=False)
    buckets = [parse_duration(b) for b in args.buckets.split(",") if b.strip()]
    if runtime.is_sim:
        harvester, rng = HARVEST_RESOLVER, random.Random(f"{runtime.scenario.seed}:harvest")
    else:
        if not args.harvester:
            raise InputError("the real backend requires --harvester")
        harvester, rng = ResolverEndpoint.parse(args.harvester), None
    pool = asyncio.run(harvest_domains(runtime.transport, harvester, args.count, buckets, rng, runtime.config))
    write_pool(args.output, pool)
    counts = pool_buckets(pool)
    print(format_table(["ttl", "domains"], [(bucket, counts.get(bucket, 0)) for bucket in buckets]))
    return EXIT_OK


@dataclass
class SamplePoint:
    offset: float
    success: float
    agreement: float
    # raw-bit agreement of each key, in encode order
    key_agreements: List[float]


@dataclass
class ExperimentResult:
    # share of zero bits in each stored codeword, in encode order
    zero_fractions: List[float]
    samples: List[SamplePoint]

    def rows(self) -> List[Tuple[float, float, float]]:
        return [(s.offset, s.success, s.agreement) for s in self.samples]


async def run_experiment(
    fabric: SimFabric,
    pool: Sequence[DomainCandidate],
    config: Settings,
    keys: int,
    ttl: int,
    message_bytes: int,
    sample_times: Sequence[float],
    seed: int,
) -> ExperimentResult:
    """
    Encode `keys` random messages at the current virtual time and, at each
    sample time after that, attempt a decode and compare a raw read of every
    cell with the stored codeword.
    """
    transport = SimTransport(fabric, config)
    rng = random.Random(f"{seed}:experiment")
    codec = codec_for(config.KEY_BITS)
    dataset = list(fabric.population)
    start = fabric.now
    runs = []
    for _ in range(keys):
        key = EphemeralKey.generate(config.KEY_BITS, rng)
        stored = codec.encode(key.bits).to_bits()
        message = bytes(rng.getrandbits(8) for _ in range(message_bytes))
        epo = await encode_message(transport, dataset, pool, message, ttl, config, rng, key=key)
        runs.append((epo, message, stored))

    samples = []
    for offset in sorted(sample_times):
        fabric.advance_to(start + offset)
        successes = 0
        agreements = []
        for epo, message, stored in runs:
            try:
                successes += await decode_message(transport, epo, config, force=True) == message
            except DecodeFailure:
                pass
            readings = await read_cells(transport, epo, range(len(epo.cells)), config)
            same = sum((r.state == BitState.ONE) == bool(bit) for r, bit in zip(readings, stored))
            agreements.append(same / len(stored))
        samples.append(SamplePoint(offset, successes / len(runs), sum(agreements) / len(runs), agreements))
    return ExperimentResult(
        zero_fractions=[1 - hamming_weight(stored) / len(stored) for _, _, stored in runs],
        samples=samples,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    runtime = build_runtime(args, persistent=False)
    experiment = runtime.scenario.experiment
    ttl = parse_duration(args.ttl) if args.ttl else experiment.ttl
    keys = args.keys or experiment.keys

    async def run():
        pool = await sim_pool(runtime.scenario, runtime.config)
        return await run_experiment(
            runtime.fabric, pool, runtime.config, keys, ttl,
            experiment.message_bytes, experiment.sample_times, runtime.scenario.seed,
        )

    result = asyncio.run(run())
    print(format_table(["time_s", "decode_success", "raw_bit_agreement"], result.rows()))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.quantity == "hamming":
        report = analysis.hamming_report(args.n)
    elif args.quantity == "collision":
        report = analysis.collision_report(args.n_docs, args.resolvers, args.domains)
    else:
        report = analysis.traffic_report(args.weight, args.avg_bytes, args.prefetch)
    rows = [("value", report.value)]
    rows += [(f"input.{k}", v) for k, v in report.inputs.items()]
    rows += [(k, v) for k, v in report.details.items()]
    rows.append(("formula", report.formula))
    print(format_table(["quantity", report.quantity], rows))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = get_settings()
    uvicorn.run("ephpub.main:app", host=args.host or config.API_HOST, port=args.port or config.API_PORT)
    return EXIT_OK


# ========== PARSER ==========

def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--backend", choices=[b.value for b in Backend], default=Backend.SIM.value)
    common.add_argument("--scenario", help="simulator scenario file (JSON)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--state", help="simulator state file (default: <scenario>.state.json)")
    common.add_argument("--advance", help="advance the virtual clock first, e.g. 25h")
    common.add_argument("--dataset", help="reliable-resolver dataset file")
    common.add_argument("--pool", help="domain pool file")
    common.add_argument("--threads", type=int, help="concurrent queries")
    common.add_argument("--timeout", type=int, help="per-query timeout in milliseconds")
    common.add_argument("--retries", type=int)
    common.add_argument("--key-bits", type=int)
    common.add_argument("--no-prefetch", action="store_true")
    common.add_argument("--force", action="store_true", help="read past the expiry guard")
    common.add_argument("--proxy")
    common.add_argument("--i-understand-network-effects", action="store_true")
    common.add_argument("-v", "--verbose", action="count", default=0)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="ephpub", description="Ephemeral publishing through DNS resolver caches")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    encode = sub.add_parser("encode", parents=[common], help="store a key and write an .epo file")
    encode.add_argument("input")
    encode.add_argument("--ttl", required=True, help="lifetime, e.g. 24h or 7d")
    encode.add_argument("-o", "--output")
    encode.add_argument("--recipient", help="wrap the EPO for this public key (PEM)")
    encode.set_defaults(handler=cmd_encode)

    decode = sub.add_parser("decode", parents=[common], help="recover the message of an .epo file")
    decode.add_argument("input")
    decode.add_argument("-o", "--output")
    decode.add_argument("--identity", help="private key (PEM) for wrapped EPOs")
    decode.add_argument("--ttl-skew", action="store_true", help="read after a flip attack")
    decode.set_defaults(handler=cmd_decode)

    inspect = sub.add_parser("inspect", parents=[common], help="print an .epo file")
    inspect.add_argument("input")
    inspect.add_argument("--identity")
    inspect.set_defaults(handler=cmd_inspect)

    keygen = sub.add_parser("keygen", parents=[common], help="create a receiver key pair")
    keygen.add_argument("prefix")
    keygen.set_defaults(handler=cmd_keygen)

    probe = sub.add_parser("probe", parents=[common], help="classify candidate resolvers")
    probe.add_argument("--candidates", help="file with one resolver address per line")
    probe.add_argument("--probe-ttl", default="24h")
    probe.add_argument("--blocklist")
    probe.add_argument("--refresh", action="store_true", help="merge into an existing dataset file")
    probe.add_argument("-o", "--output", default="resolvers.dataset")
    probe.set_defaults(handler=cmd_probe)

    harvest = sub.add_parser("harvest", parents=[common], help="collect domains by TTL bucket")
    harvest.add_argument("--count", type=int, default=400, help="domains per bucket")
    harvest.add_argument("--buckets", default="24h")
    harvest.add_argument("--harvester", help="resolver used for lookups (real backend)")
    harvest.add_argument("-o", "--output", default="domains.pool")
    harvest.set_defaults(handler=cmd_harvest)

    simulate = sub.add_parser("simulate", parents=[common], help="recovery over virtual time")
    simulate.add_argument("--keys", type=int)
    simulate.add_argument("--ttl")
    simulate.set_defaults(handler=cmd_simulate)

    analyze = sub.add_parser("analyze", parents=[common], help="closed-form estimates")
    quantities = analyze.add_subparsers(dest="quantity", required=True, parser_class=_Parser)
    hamming = quantities.add_parser("hamming")
    hamming.add_argument("n", type=int)
    collision = quantities.add_parser("collision")
    collision.add_argument("n_docs", type=int)
    collision.add_argument("resolvers", type=int)
    collision.add_argument("domains", type=int)
    traffic = quantities.add_parser("traffic")
    traffic.add_argument("weight", type=int)
    traffic.add_argument("--avg-bytes", type=int)
    traffic.add_argument("--prefetch", action="store_true")
    analyze.set_defaults(handler=cmd_analyze)

    serve = sub.add_parser("serve", parents=[common], help="run the local HTTP API")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    serve.set_defaults(handler=cmd_serve)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = get_settings().LOG_LEVEL.upper()
    if verbosity == 1:
        level = "INFO"
    elif verbosity > 1:
        level = "DEBUG"
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose)
        return args.handler(args)
    except EphPubError as exc:
        code = exit_code_for(exc)
        print(f"ephpub: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"ephpub: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        logger.exception("unexpected error")
        return EXIT_UNEXPECTED
