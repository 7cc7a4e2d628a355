import math
from typing import Optional

from ephpub.config import Settings, settings
from ephpub.exceptions import InputError
from ephpub.schemas import AnalysisReport
from ephpub.services.rs6355 import DEFAULT_KEY_BITS, stored_bits_for

MAX_ENTROPY_BITS = 4096


def hamming_entropy_loss(n_bits: int) -> float:
    """
    Entropy lost when the Hamming weight of an n-bit key is public:
    n - log2(sum_m C(n, m)^2 / 2^n). The sum is an exact integer.
    """
    if not 1 <= n_bits <= MAX_ENTROPY_BITS:
        raise InputError(f"key length must be within 1..{MAX_ENTROPY_BITS}")
    total = sum(math.comb(n_bits, m) ** 2 for m in range(n_bits + 1))
    return 2 * n_bits - math.log2(total)


def collision_probability(n_docs: int, resolvers: int, domains_in_bucket: int) -> float:
    """Birthday bound 1 - exp(-n(n-1) / 2d) with d = resolvers * domains"""
    if n_docs < 1 or resolvers < 1 or domains_in_bucket < 1:
        raise InputError("collision inputs must be positive")
    d = resolvers * domains_in_bucket
    return -math.expm1(-n_docs * (n_docs - 1) / (2.0 * d))


def traffic_transactions(codeword_weight: int, prefetch: bool = False, key_bits: int = DEFAULT_KEY_BITS) -> int:
    """Writes for the 1-bits, one read per cell, one prefetch per cell when enabled"""
    cells = stored_bits_for(key_bits)
    if not 0 <= codeword_weight <= cells:
        raise InputError(f"codeword weight must be within 0..{cells}")
    return codeword_weight + cells + (cells if prefetch else 0)


def traffic_estimate(
    codeword_weight: int,
    avg_msg_bytes: Optional[int] = None,
    prefetch: bool = False,
    key_bits: int = DEFAULT_KEY_BITS,
    config: Optional[Settings] = None,
) -> int:
    """
    Bytes counting one direction per transaction: 352 transactions at 180
    bytes give 31680, the 32 KB figure for a full-weight codeword. The
    round trip (query and response both counted) is twice this and is
    reported as `round_trip_bytes` by `traffic_report`; a weight-0 codeword
    has a round trip of 176 * 180 bytes.
    """
    config = config or settings
    avg = config.AVG_DNS_MESSAGE_BYTES if avg_msg_bytes is None else avg_msg_bytes
    if avg <= 0:
        raise InputError("average message size must be positive")
    return traffic_transactions(codeword_weight, prefetch, key_bits) * avg // 2


# ========== REPORTS ==========

def hamming_report(n_bits: int) -> AnalysisReport:
    loss = hamming_entropy_loss(n_bits)
    return AnalysisReport(
        quantity="hamming_entropy_loss",
        inputs={"n_bits": n_bits},
        value=loss,
        formula="n - log2(sum_m C(n,m)^2 / 2^n)",
        details={"residual_bits": n_bits - loss},
    )


def collision_report(n_docs: int, resolvers: int, domains_in_bucket: int) -> AnalysisReport:
    exponent = n_docs * (n_docs - 1) / (2.0 * resolvers * domains_in_bucket)
    return AnalysisReport(
        quantity="collision_probability",
        inputs={"n_docs": n_docs, "resolvers": resolvers, "domains_in_bucket": domains_in_bucket},
        value=collision_probability(n_docs, resolvers, domains_in_bucket),
        formula="1 - exp(-n(n-1) / 2d), d = resolvers * domains",
        details={"exponent": exponent},
    )


def traffic_report(
    codeword_weight: int,
    avg_msg_bytes: Optional[int] = None,
    prefetch: bool = False,
    key_bits: int = DEFAULT_KEY_BITS,
    config: Optional[Settings] = None,
) -> AnalysisReport:
    config = config or settings
    avg = config.AVG_DNS_MESSAGE_BYTES if avg_msg_bytes is None else avg_msg_bytes
    transactions = traffic_transactions(codeword_weight, prefetch, key_bits)
    return AnalysisReport(
        quantity="traffic_bytes",
        inputs={"codeword_weight": codeword_weight, "avg_msg_bytes": avg, "prefetch": prefetch, "key_bits": key_bits},
        value=traffic_estimate(codeword_weight, avg, prefetch, key_bits, config),
        formula="(writes + reads [+ prefetches]) * avg_msg_bytes / 2",
        details={"transactions": transactions, "round_trip_bytes": transactions * avg},
    )
