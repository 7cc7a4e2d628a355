"""DNS query encoding and response classification on top of dnspython."""

import logging
import secrets

import dns.exception
import dns.flags
import dns.message
import dns.name
import dns.rcode
import dns.rdatatype
import dns.reversename

from ephpub.exceptions import InputError, ParseError
from ephpub.schemas import DnsQuestion, QueryMode, QueryOutcome

logger = logging.getLogger(__name__)

MAX_LABEL_OCTETS = 63
MAX_NAME_OCTETS = 255


def new_txid() -> int:
    """Transaction ID from the OS CSPRNG"""
    return secrets.randbits(16)


def reverse_name(address: str) -> str:
    """`1.2.3.4` -> `4.3.2.1.in-addr.arpa`"""
    return dns.reversename.from_address(str(address)).to_text(omit_final_dot=True)


def encode_query(q: DnsQuestion, txid: int) -> bytes:
    """Standard query; RD is set iff the question is recursive"""
    if not 0 <= txid <= 0xFFFF:
        raise InputError(f"transaction id {txid} does not fit 16 bits")
    try:
        qname = dns.name.from_text(q.qname)
        rdtype = dns.rdatatype.from_text(q.qtype)
    except dns.exception.DNSException as exc:
        raise InputError(f"invalid question {q.qname!r}/{q.qtype}: {exc}") from exc

    message = dns.message.make_query(qname, rdtype, use_edns=False)
    message.id = txid
    if q.mode == QueryMode.RECURSIVE:
        message.flags |= dns.flags.RD
    else:
        message.flags &= ~dns.flags.RD
    return message.to_wire()


def parse_response(data: bytes, expected_txid: int) -> QueryOutcome:
    """
    Classify a response datagram.

    Hit: NOERROR with at least one answer, TTL of the first answer.
    Miss: NOERROR with no answers, or NXDOMAIN.
    Refused: REFUSED and every other error rcode.
    Anything unparseable, or with the wrong ID, is a ParseError.
    """
    try:
        message = dns.message.from_wire(data)
    except Exception as exc:
        raise ParseError(f"malformed DNS response: {exc}") from exc

    if message.id != expected_txid:
        raise ParseError(f"transaction id {message.id} does not match {expected_txid}", position=0)
    if not message.flags & dns.flags.QR:
        raise ParseError("datagram is not a response", position=2)

    rcode = message.rcode()
    if rcode == dns.rcode.NXDOMAIN:
        return QueryOutcome.miss()
    if rcode != dns.rcode.NOERROR:
        return QueryOutcome.refused()

    answers = [rrset for rrset in message.answer if len(rrset) > 0]
    if not answers:
        return QueryOutcome.miss()
    first = answers[0]
    rdata = next(iter(first))
    return QueryOutcome.hit(int(first.ttl), answer=rdata.to_text().rstrip("."))
