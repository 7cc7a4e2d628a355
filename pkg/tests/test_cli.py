import pytest
from pydantic import ValidationError

from ephpub.cli import (
    EXIT_DECODE,
    EXIT_ENCODE,
    EXIT_EXPIRED,
    EXIT_OK,
    EXIT_SKEW,
    EXIT_UNEXPECTED,
    EXIT_USAGE,
    exit_code_for,
    main,
)
from ephpub.exceptions import (
    AmbiguousSkew,
    AuthFailure,
    ConfigurationError,
    DecodeFailure,
    EncodeFailure,
    Expired,
    InputError,
    InsufficientDomains,
    ParseError,
)
from ephpub.schemas import Backend, CliConfig
from tests.conftest import SCENARIOS

SMALL = str(SCENARIOS / "small.json")
COMPLIANT = str(SCENARIOS / "compliant_100.json")


def rows(output):
    """Data rows of a TSV table as {first column: rest}"""
    table = {}
    for line in output.splitlines():
        if line.startswith("#") or not line.strip():
            continue
        key, *rest = line.split("\t")
        table[key] = rest
    return table


@pytest.fixture
def sim(tmp_path):
    state = tmp_path / "small.state.json"
    return ["--scenario", SMALL, "--state", str(state)]


@pytest.mark.parametrize(
    "error,code",
    [
        (Expired(10, 11), EXIT_EXPIRED),
        (AmbiguousSkew(1, 30), EXIT_SKEW),
        (EncodeFailure("no", stage="write"), EXIT_ENCODE),
        (InsufficientDomains("none"), EXIT_ENCODE),
        (DecodeFailure("bad"), EXIT_DECODE),
        (ParseError("bad", 3), EXIT_DECODE),
        (AuthFailure("bad"), EXIT_DECODE),
        (InputError("bad"), EXIT_USAGE),
        (ConfigurationError("bad"), EXIT_USAGE),
        (RuntimeError("bad"), EXIT_UNEXPECTED),
    ],
)
def test_exit_codes(error, code):
    assert exit_code_for(error) == code


def test_missing_arguments_are_a_usage_error():
    assert main(["encode"]) == EXIT_USAGE


def test_sim_backend_needs_a_scenario(tmp_path):
    message = tmp_path / "msg"
    message.write_bytes(b"x")
    assert main(["encode", str(message), "--ttl", "24h"]) == EXIT_USAGE


def test_real_backend_needs_acknowledgement(tmp_path):
    message = tmp_path / "msg"
    message.write_bytes(b"x")
    assert main(["encode", str(message), "--ttl", "24h", "--backend", "real"]) == EXIT_USAGE


def test_real_encode_needs_dataset_and_pool(tmp_path, capsys):
    message = tmp_path / "msg"
    message.write_bytes(b"x")
    args = ["encode", str(message), "--ttl", "24h", "--backend", "real", "--i-understand-network-effects"]
    assert main(args) == EXIT_USAGE
    assert "--dataset and --pool" in capsys.readouterr().err


def test_backend_inputs_depend_on_the_command():
    with pytest.raises(ValidationError, match="--dataset and --pool"):
        CliConfig(command="encode", backend=Backend.REAL, pool="domains.pool")
    with pytest.raises(ValidationError, match="--pool"):
        CliConfig(command="probe", backend=Backend.REAL)
    assert CliConfig(command="decode", backend=Backend.REAL).dataset is None
    assert CliConfig(command="encode", backend=Backend.REAL, dataset="r.dataset", pool="d.pool").pool == "d.pool"


def test_encode_then_decode(tmp_path, sim, capsys):
    message = tmp_path / "note.txt"
    message.write_bytes(b"meet at the usual place" * 40)
    epo = tmp_path / "note.txt.epo"

    assert main(["encode", str(message), "--ttl", "24h", *sim]) == EXIT_OK
    encoded = rows(capsys.readouterr().out)
    assert encoded["cells"] == ["176"]
    size = epo.stat().st_size
    assert 920 + 28 + 3000 < size < 920 + 28 + 5000

    message.unlink()
    assert main(["decode", str(epo), *sim]) == EXIT_OK
    decoded = rows(capsys.readouterr().out)
    assert decoded["reads"] == ["128"]
    assert message.read_bytes() == b"meet at the usual place" * 40


def test_empty_message(tmp_path, sim):
    message = tmp_path / "empty"
    message.write_bytes(b"")
    out = tmp_path / "empty.out"
    assert main(["encode", str(message), "--ttl", "1d", "-o", str(tmp_path / "empty.epo"), *sim]) == EXIT_OK
    assert main(["decode", str(tmp_path / "empty.epo"), "-o", str(out), *sim]) == EXIT_OK
    assert out.read_bytes() == b""


def test_decode_after_expiry(tmp_path, sim):
    message = tmp_path / "msg"
    message.write_bytes(b"short lived")
    epo = tmp_path / "msg.epo"
    assert main(["encode", str(message), "--ttl", "24h", *sim]) == EXIT_OK
    message.unlink()
    assert main(["decode", str(epo), "--advance", "25h", *sim]) == EXIT_EXPIRED
    assert not message.exists()


def test_unavailable_ttl(tmp_path, sim, capsys):
    message = tmp_path / "msg"
    message.write_bytes(b"x")
    assert main(["encode", str(message), "--ttl", "9d", *sim]) == EXIT_ENCODE
    assert "no domains with requested TTL" in capsys.readouterr().err


def test_corrupted_epo(tmp_path, sim):
    epo = tmp_path / "broken.epo"
    epo.write_bytes(b"EPO1" + b"\x00" * 40)
    assert main(["decode", str(epo), *sim]) == EXIT_DECODE


def test_recipient_wrapping(tmp_path, sim):
    prefix = str(tmp_path / "bob")
    assert main(["keygen", prefix]) == EXIT_OK
    message = tmp_path / "msg"
    message.write_bytes(b"for bob only")
    epo = tmp_path / "msg.epo"
    assert main(["encode", str(message), "--ttl", "24h", "--recipient", prefix + ".pub", *sim]) == EXIT_OK

    out = tmp_path / "plain"
    assert main(["decode", str(epo), "-o", str(out), *sim]) == EXIT_USAGE
    assert main(["decode", str(epo), "-o", str(out), "--identity", prefix + ".key", *sim]) == EXIT_OK
    assert out.read_bytes() == b"for bob only"


def test_inspect(tmp_path, sim, capsys):
    message = tmp_path / "msg"
    message.write_bytes(b"abc")
    assert main(["encode", str(message), "--ttl", "24h", *sim]) == EXIT_OK
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "msg.epo")]) == EXIT_OK
    assert rows(capsys.readouterr().out)["cells"] == ["176"]


def test_state_persists_between_runs(tmp_path, sim):
    message = tmp_path / "msg"
    message.write_bytes(b"abc")
    assert main(["encode", str(message), "--ttl", "24h", *sim]) == EXIT_OK
    assert (tmp_path / "small.state.json").exists()


def test_probe_compliant_population(tmp_path, capsys):
    dataset = tmp_path / "resolvers.dataset"
    assert main(["probe", "--scenario", COMPLIANT, "-o", str(dataset)]) == EXIT_OK
    table = rows(capsys.readouterr().out)
    assert table["0"][1] == "100"
    assert table["4"][1] == "100"
    lines = [line for line in dataset.read_text().splitlines() if not line.startswith("#")]
    assert len(lines) == 100


def test_harvest(tmp_path, capsys):
    pool = tmp_path / "domains.pool"
    assert main(["harvest", "--scenario", SMALL, "--count", "20", "--buckets", "24h", "-o", str(pool)]) == EXIT_OK
    assert rows(capsys.readouterr().out)["86400"] == ["20"]
    assert len(pool.read_text().splitlines()) == 21


def test_simulate(capsys):
    assert main(["simulate", "--scenario", SMALL, "--keys", "2"]) == EXIT_OK
    table = rows(capsys.readouterr().out)
    assert table["3600"][0] == "1"
    assert table["86040"][0] == "1"
    assert table["86401"][0] == "0"
    assert 0.3 < float(table["86401"][1]) < 0.7


def test_analyze(capsys):
    assert main(["analyze", "hamming", "128"]) == EXIT_OK
    assert 4.2 < float(rows(capsys.readouterr().out)["value"][0]) < 4.45
    assert main(["analyze", "traffic", "176"]) == EXIT_OK
    assert rows(capsys.readouterr().out)["value"][0] == "31680"
    assert main(["analyze", "collision", "10000", "25000", "1000000"]) == EXIT_OK
    assert float(rows(capsys.readouterr().out)["value"][0]) == pytest.approx(1.9978e-3, abs=1e-6)
