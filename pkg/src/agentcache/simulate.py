"""Step-level Monte Carlo over speculation strategies.

Models one agent iteration per step: the speculator proposes fan_out
candidates over a fresh page with a given branching factor, the target then
looks up its true action. Cache counters come from the real cache, so the
measured hit rate law matches the runtime's accounting semantics. Purely
synchronous in virtual time; no sleeping, deterministic per cell seed.
"""

from __future__ import annotations

import csv
import itertools
import json
import random
from dataclasses import dataclass
from typing import Optional

from .cache import ActionObservationCache, Hit, InFlight, Miss
from .errors import ConfigError
from .model import VISIT_PAGE, Action, Observation, cache_key_of
from .speculator import SpeculationPolicy, predict_candidates


@dataclass(frozen=True)
class SimCell:
    branching: int
    fan_out: int
    strategy: str  # off | uniform_random | oracle
    oracle_accuracy: float
    fetch_latency: float
    reasoning_latency: float
    steps: int
    seed: int
    capacity: int = 4096

    def __post_init__(self):
        if self.branching < 1:
            raise ConfigError("branching", "must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps", "must be >= 1")
        if self.strategy not in ("off", "uniform_random", "oracle"):
            raise ConfigError("strategy", f"unsupported in simulation: {self.strategy!r}")


@dataclass
class SimCellResult:
    cell: SimCell
    hits: int = 0
    joined: int = 0
    misses: int = 0
    total_env_wait: float = 0.0

    @property
    def lookups(self) -> int:
        return self.hits + self.joined + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    @property
    def joined_rate(self) -> float:
        return self.joined / self.lookups if self.lookups else 0.0

    @property
    def mean_env_wait(self) -> float:
        return self.total_env_wait / self.cell.steps

    @property
    def mean_iteration_total(self) -> float:
        return self.cell.reasoning_latency + self.mean_env_wait

    def to_row(self) -> dict:
        c = self.cell
        return {
            "branching": c.branching,
            "fan_out": c.fan_out,
            "strategy": c.strategy,
            "oracle_accuracy": c.oracle_accuracy,
            "fetch_latency": c.fetch_latency,
            "reasoning_latency": c.reasoning_latency,
            "steps": c.steps,
            "seed": c.seed,
            "hits": self.hits,
            "joined_in_flight": self.joined,
            "misses": self.misses,
            "hit_rate": round(self.hit_rate, 6),
            "joined_rate": round(self.joined_rate, 6),
            "mean_env_wait": round(self.mean_env_wait, 6),
            "mean_iteration_total": round(self.mean_iteration_total, 6),
        }


def _obs(url: str, buttons: tuple[str, ...], latency: float) -> Observation:
    return Observation(content="", buttons=buttons, resolved_url=url, fetch_latency=latency)


def run_cell(cell: SimCell) -> SimCellResult:
    rng = random.Random(cell.seed)
    cache = ActionObservationCache(capacity=cell.capacity)
    result = SimCellResult(cell=cell)
    labels = tuple(f"button {i}" for i in range(cell.branching))
    policy: Optional[SpeculationPolicy] = None
    if cell.strategy != "off":
        policy = SpeculationPolicy(
            fan_out=cell.fan_out,
            strategy=cell.strategy,
            oracle_accuracy=cell.oracle_accuracy,
        )
    prefetch_ready = cell.fetch_latency <= cell.reasoning_latency

    def _candidates(page: Observation, truth: Action) -> list[Action]:
        # uniform_random/oracle prediction never awaits; drive the coroutine
        # to completion directly instead of spinning up an event loop per step.
        coro = predict_candidates(
            "", page, policy, rng=rng, peek_next_action=lambda: truth
        )
        try:
            coro.send(None)
        except StopIteration as stop:
            return stop.value
        coro.close()
        raise RuntimeError("candidate prediction unexpectedly suspended")

    for step in range(cell.steps):
        origin = f"https://sim.local/s{step}"
        page = _obs(origin, labels, 0.0)
        truth = Action(VISIT_PAGE, rng.choice(labels), origin)
        truth_key = cache_key_of(truth)

        pending = []  # claims still in flight when the target commits
        if policy is not None:
            candidates = _candidates(page, truth)
            for candidate in candidates:
                outcome = cache.lookup(cache_key_of(candidate), count_stats=False)
                if not isinstance(outcome, Miss):
                    continue
                target_url = f"{origin}/{candidate.argument}"
                if prefetch_ready:
                    cache.fulfill(
                        outcome.claim,
                        _obs(target_url, (), cell.fetch_latency),
                        inserted_by="speculative",
                    )
                else:
                    pending.append((outcome.claim, target_url))

        outcome = cache.lookup(truth_key)
        if isinstance(outcome, Hit):
            result.hits += 1
        elif isinstance(outcome, InFlight):
            result.joined += 1
            result.total_env_wait += cell.fetch_latency - cell.reasoning_latency
        else:
            result.misses += 1
            result.total_env_wait += cell.fetch_latency
            cache.fulfill(
                outcome.claim,
                _obs(f"{origin}/{truth.argument}", (), cell.fetch_latency),
                inserted_by="live",
            )
        for claim, target_url in pending:
            if not claim._settled:
                cache.fulfill(
                    claim, _obs(target_url, (), cell.fetch_latency), inserted_by="speculative"
                )
    return result


def expand_sweep(spec) -> list[SimCell]:
    """Grid expansion of a sweep spec (path or dict); per-cell seeds."""
    if not isinstance(spec, dict):
        with open(spec, encoding="utf-8") as f:
            spec = json.load(f)

    def as_list(key, default):
        value = spec.get(key, default)
        return value if isinstance(value, list) else [value]

    base_seed = spec.get("seed", 0)
    steps = spec.get("steps", 5000)
    capacity = spec.get("capacity", 4096)
    cells = []
    grid = itertools.product(
        as_list("branching", 81),
        as_list("fan_out", 3),
        as_list("strategy", "uniform_random"),
        as_list("oracle_accuracy", 1.0),
        as_list("fetch_latency", 0.2),
        as_list("reasoning_latency", 0.3),
    )
    for index, (b, k, strategy, p, fetch, reasoning) in enumerate(grid):
        cells.append(
            SimCell(
                branching=b,
                fan_out=k,
                strategy=strategy,
                oracle_accuracy=p,
                fetch_latency=fetch,
                reasoning_latency=reasoning,
                steps=steps,
                seed=base_seed + index,
                capacity=capacity,
            )
        )
    return cells


def run_sweep(spec) -> list[SimCellResult]:
    return [run_cell(cell) for cell in expand_sweep(spec)]


def write_sweep_csv(results: list[SimCellResult], path) -> None:
    rows = [r.to_row() for r in results]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
