"""Bounded LRU action-observation cache with in-flight coalescing.

Shared between the agent loop and speculative workers (asyncio tasks on one
event loop). The hit / in-flight / miss decision is atomic: no await happens
between the lookup check and ticket registration, so concurrent lookups of
an absent key yield exactly one claim and the rest join the in-flight fetch.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Union

from .model import CacheKey, Observation


@dataclass
class CacheStats:
    lookups: int = 0
    hits: int = 0
    joined_in_flight: int = 0
    misses: int = 0
    insertions: int = 0
    evictions: int = 0

    @property
    def hit_rate(self) -> Optional[float]:
        if self.lookups == 0:
            return None
        return self.hits / self.lookups

    def to_dict(self) -> dict:
        return {
            "lookups": self.lookups,
            "hits": self.hits,
            "joined_in_flight": self.joined_in_flight,
            "misses": self.misses,
            "insertions": self.insertions,
            "evictions": self.evictions,
            "hit_rate": self.hit_rate,
        }


@dataclass
class CacheEntry:
    key: CacheKey
    observation: Observation
    inserted_by: str  # "speculative" | "live"
    insert_seq: int


class Claim:
    """Exclusive right to fetch a missing key; must be fulfilled or aborted."""

    __slots__ = ("key", "_settled")

    def __init__(self, key: CacheKey):
        self.key = key
        self._settled = False


_UNSETTLED = object()


class _Ticket:
    __slots__ = ("key", "claim", "_future", "_result", "waiters")

    def __init__(self, key: CacheKey, claim: Claim):
        self.key = key
        self.claim = claim
        self._future: Optional[asyncio.Future] = None
        self._result = _UNSETTLED
        self.waiters = 0

    def future(self) -> asyncio.Future:
        # Created lazily so purely synchronous use needs no event loop.
        if self._future is None:
            self._future = asyncio.get_running_loop().create_future()
            if self._result is not _UNSETTLED:
                self._future.set_result(self._result)
        return self._future

    def settle(self, result: Optional[Observation]) -> None:
        self._result = result
        if self._future is not None and not self._future.done():
            self._future.set_result(result)


@dataclass(frozen=True)
class Hit:
    observation: Observation


@dataclass(frozen=True)
class Miss:
    claim: Claim


class InFlight:
    """Awaitable handle on another caller's pending fetch.

    wait() returns the observation, or None if the owning claim was aborted,
    in which case the caller should retry lookup to obtain its own claim.
    """

    def __init__(self, ticket: "_Ticket"):
        self._ticket = ticket

    async def wait(self) -> Optional[Observation]:
        return await asyncio.shield(self._ticket.future())


LookupOutcome = Union[Hit, Miss, InFlight]


class ActionObservationCache:
    """LRU map CacheKey -> Observation with single-flight fetch coalescing."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict[CacheKey, CacheEntry] = OrderedDict()
        self._inflight: dict[CacheKey, _Ticket] = {}
        self._stats = CacheStats()
        self._insert_seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def resident_keys(self) -> list[CacheKey]:
        """LRU order, least recently used first."""
        return list(self._entries.keys())

    def lookup(self, key: CacheKey, count_stats: bool = True) -> LookupOutcome:
        """Atomic hit / in-flight / miss decision.

        Speculative probes pass count_stats=False so reported hit rates
        reflect only the agent loop's lookups.
        """
        entry = self._entries.get(key)
        if entry is not None:
            self._entries.move_to_end(key)
            if count_stats:
                self._stats.lookups += 1
                self._stats.hits += 1
            return Hit(entry.observation)
        ticket = self._inflight.get(key)
        if ticket is not None:
            ticket.waiters += 1
            if count_stats:
                self._stats.lookups += 1
                self._stats.joined_in_flight += 1
            return InFlight(ticket)
        claim = Claim(key)
        self._inflight[key] = _Ticket(key, claim)
        if count_stats:
            self._stats.lookups += 1
            self._stats.misses += 1
        return Miss(claim)

    def fulfill(self, claim: Claim, observation: Observation, inserted_by: str = "live") -> None:
        ticket = self._take_ticket(claim)
        self._insert_seq += 1
        self._entries[claim.key] = CacheEntry(
            key=claim.key,
            observation=observation,
            inserted_by=inserted_by,
            insert_seq=self._insert_seq,
        )
        self._entries.move_to_end(claim.key)
        self._stats.insertions += 1
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
            self._stats.evictions += 1
        ticket.settle(observation)

    def abort(self, claim: Claim) -> None:
        ticket = self._take_ticket(claim)
        ticket.settle(None)

    def _take_ticket(self, claim: Claim) -> _Ticket:
        if claim._settled:
            raise RuntimeError(f"claim for {claim.key} already fulfilled or aborted")
        ticket = self._inflight.get(claim.key)
        if ticket is None or ticket.claim is not claim:
            raise RuntimeError(f"claim for {claim.key} is not active")
        claim._settled = True
        del self._inflight[claim.key]
        return ticket

    def stats(self) -> CacheStats:
        return CacheStats(**{f: getattr(self._stats, f) for f in (
            "lookups", "hits", "joined_in_flight", "misses", "insertions", "evictions")})

    def reset_stats(self) -> None:
        self._stats = CacheStats()

    def dump(self, path) -> None:
        """Debug dump: one JSON object per entry (not a persistence format)."""
        with open(path, "w", encoding="utf-8") as f:
            for entry in self._entries.values():
                record = {
                    "key": entry.key.to_dict(),
                    "resolved_url": entry.observation.resolved_url,
                    "buttons": list(entry.observation.buttons),
                    "content_digest": hashlib.sha256(
                        entry.observation.content.encode("utf-8")
                    ).hexdigest(),
                    "inserted_by": entry.inserted_by,
                    "insert_seq": entry.insert_seq,
                }
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
