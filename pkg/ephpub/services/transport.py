"""
The transport contract and the real-network backend.

Both backends answer `query(resolver, question, timeout_ms)` with a
QueryOutcome and expose `now()`: wall-clock seconds for the UDP backend,
virtual seconds for the simulator. Retries happen inside `query`; a Timeout
is only returned once every attempt failed.
"""

import asyncio
import logging
import time
from typing import Optional, Protocol, runtime_checkable

from ephpub.config import Settings, settings
from ephpub.exceptions import ConfigurationError, ParseError
from ephpub.schemas import DnsQuestion, QueryOutcome, ResolverEndpoint
from ephpub.services.dns_wire import encode_query, new_txid, parse_response

logger = logging.getLogger(__name__)


@runtime_checkable
class Transport(Protocol):
    async def query(
        self,
        res: ResolverEndpoint,
        q: DnsQuestion,
        timeout_ms: Optional[int] = None,
    ) -> QueryOutcome:
        ...

    def now(self) -> float:
        ...


class _ResponseCollector(asyncio.DatagramProtocol):
    def __init__(self, future: "asyncio.Future[bytes]"):
        self.future = future

    def datagram_received(self, data: bytes, addr) -> None:
        if not self.future.done():
            self.future.set_result(data)

    def error_received(self, exc: Exception) -> None:
        if not self.future.done():
            self.future.set_exception(exc)


class UdpTransport:
    """DNS over UDP port 53, one socket per attempt, bounded concurrency"""

    def __init__(self, config: Optional[Settings] = None):
        config = config or settings
        if config.PROXY_ADDRESS:
            raise ConfigurationError(
                f"proxy {config.PROXY_ADDRESS} is configured but the UDP backend cannot tunnel"
            )
        self.timeout_s = config.timeout_seconds
        self.retries = config.DNS_RETRIES
        self.parallelism = config.PARALLELISM
        self._semaphore: Optional[asyncio.Semaphore] = None

    def now(self) -> float:
        return time.time()

    async def query(
        self,
        res: ResolverEndpoint,
        q: DnsQuestion,
        timeout_ms: Optional[int] = None,
    ) -> QueryOutcome:
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(self.parallelism)
        timeout = timeout_ms / 1000.0 if timeout_ms else self.timeout_s
        async with self._semaphore:
            for attempt in range(self.retries + 1):
                txid = new_txid()
                started = time.monotonic()
                try:
                    data = await self._exchange(res, encode_query(q, txid), timeout)
                    outcome = parse_response(data, txid)
                except (asyncio.TimeoutError, OSError, ParseError) as exc:
                    logger.debug("%s %s attempt %d failed: %s", res, q.qname, attempt + 1, exc)
                    continue
                rtt_ms = (time.monotonic() - started) * 1000.0
                return outcome.model_copy(update={"rtt_ms": rtt_ms})
        return QueryOutcome.timeout(rtt_ms=timeout * 1000.0 * (self.retries + 1))

    async def _exchange(self, res: ResolverEndpoint, wire: bytes, timeout: float) -> bytes:
        loop = asyncio.get_running_loop()
        future: "asyncio.Future[bytes]" = loop.create_future()
        transport, _ = await loop.create_datagram_endpoint(
            lambda: _ResponseCollector(future),
            remote_addr=(str(res.address), res.port),
        )
        try:
            transport.sendto(wire)
            return await asyncio.wait_for(future, timeout)
        finally:
            transport.close()
