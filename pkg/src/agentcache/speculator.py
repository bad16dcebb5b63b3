"""Speculative prefetching: predict candidate actions and execute them
against the environment in the background, fulfilling cache claims.

Speculation is strictly best-effort. Draft-model failures, parse garbage,
and fetch errors are contained here and never reach the agent loop; results
flow only through the shared cache. Rounds launched in one iteration keep
running after the target commits its action; they are cancelled only when
the episode ends.
"""

from __future__ import annotations

import asyncio
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .cache import ActionObservationCache, Miss
from .environment import Environment
from .model import VISIT_PAGE, Action, Observation, cache_key_of, normalize_label
from .modelclient import (
    ChatClient,
    ChatRequest,
    TOOL_DESCRIPTION,
    TOOL_NAMES,
    parse_draft_reply,
    render,
)

STRATEGIES = ("draft_model", "uniform_random", "oracle")


@dataclass(frozen=True)
class SpeculationPolicy:
    fan_out: int = 3
    strategy: str = "draft_model"
    max_concurrent_fetches: int = 4
    oracle_accuracy: float = 1.0  # only meaningful for the oracle strategy

    def __post_init__(self):
        if self.fan_out < 1:
            raise ValueError("fan_out must be >= 1")
        if self.max_concurrent_fetches < 1:
            raise ValueError("max_concurrent_fetches must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy: {self.strategy!r}")
        if not 0.0 <= self.oracle_accuracy <= 1.0:
            raise ValueError("oracle accuracy must be in [0, 1]")


@dataclass
class SpeculationRound:
    iteration_index: int
    candidates: list[Action] = field(default_factory=list)
    outcomes: dict[int, str] = field(default_factory=dict)  # candidate idx -> status

    CACHED = "cached"
    ALREADY_CACHED = "already_cached"
    FAILED = "failed"
    CANCELLED = "cancelled"


def _distinct(actions: list[Action], limit: int) -> list[Action]:
    seen = set()
    out = []
    for action in actions:
        key = cache_key_of(action)
        if key not in seen:
            seen.add(key)
            out.append(action)
            if len(out) >= limit:
                break
    return out


async def predict_candidates(
    question: str,
    page: Observation,
    policy: SpeculationPolicy,
    *,
    draft_client: Optional[ChatClient] = None,
    rng: Optional[random.Random] = None,
    peek_next_action: Optional[Callable[[], Optional[Action]]] = None,
) -> list[Action]:
    """Up to fan_out distinct actions over the current page's buttons.

    Draft outputs naming buttons that do not exist on the page are dropped
    rather than fuzzy-matched. Transport failures yield an empty list.
    """
    origin = page.resolved_url
    if not page.buttons:
        return []

    if policy.strategy == "uniform_random":
        rng = rng or random.Random()
        k = min(policy.fan_out, len(page.buttons))
        labels = rng.sample(list(page.buttons), k)
        return _distinct(
            [Action(VISIT_PAGE, label, origin) for label in labels], policy.fan_out
        )

    if policy.strategy == "oracle":
        rng = rng or random.Random()
        truth = peek_next_action() if peek_next_action else None
        truth_label = normalize_label(truth.argument) if truth is not None else None
        candidates: list[Action] = []
        if truth is not None and rng.random() < policy.oracle_accuracy:
            candidates.append(truth)
        # Fillers never include the true action: the set contains it exactly
        # when the accuracy draw above succeeded.
        fillers = [b for b in page.buttons if normalize_label(b) != truth_label]
        rng.shuffle(fillers)
        for label in fillers:
            if len(candidates) >= policy.fan_out:
                break
            candidates.append(Action(VISIT_PAGE, label, origin))
        return _distinct(candidates, policy.fan_out)

    # draft_model
    if draft_client is None:
        raise ValueError("draft_model strategy requires a draft client")
    prompt = render(
        "draft_predict",
        tool_description=TOOL_DESCRIPTION,
        tool_names=TOOL_NAMES,
        query=question,
        observation=_page_summary(page),
    )
    try:
        response = await draft_client.complete(ChatRequest.user(prompt))
    except Exception:
        return []  # best effort: never fail the run
    known = {normalize_label(b): b for b in page.buttons}
    actions = []
    for button in parse_draft_reply(response.text):
        label = known.get(normalize_label(button))
        if label is not None:
            actions.append(Action(VISIT_PAGE, label, origin))
    return _distinct(actions, policy.fan_out)


def _page_summary(page: Observation) -> str:
    buttons = ", ".join(page.buttons)
    return f"URL: {page.resolved_url}\nButtons: [{buttons}]\nContent: {page.content}"


class Speculator:
    """Owns the background prefetch tasks for one episode."""

    def __init__(
        self,
        cache: ActionObservationCache,
        environment: Environment,
        policy: SpeculationPolicy,
        draft_client: Optional[ChatClient] = None,
        rng: Optional[random.Random] = None,
        peek_next_action: Optional[Callable[[Observation], Optional[Action]]] = None,
    ):
        self.cache = cache
        self.environment = environment
        self.policy = policy
        self.draft_client = draft_client
        self.rng = rng or random.Random()
        self.peek_next_action = peek_next_action
        self.rounds: list[SpeculationRound] = []
        self._semaphore = asyncio.Semaphore(policy.max_concurrent_fetches)
        self._tasks: set[asyncio.Task] = set()

    def launch(self, iteration_index: int, question: str, page: Observation) -> SpeculationRound:
        """Start one speculation round; returns immediately.

        For the oracle strategy the target's upcoming action is peeked
        synchronously here, before the target model consumes it.
        """
        round_ = SpeculationRound(iteration_index=iteration_index)
        self.rounds.append(round_)
        peeked = None
        if self.policy.strategy == "oracle" and self.peek_next_action:
            peeked = self.peek_next_action(page)
        task = asyncio.ensure_future(self._run_round(round_, question, page, peeked))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return round_

    async def _run_round(
        self,
        round_: SpeculationRound,
        question: str,
        page: Observation,
        peeked: Optional[Action],
    ) -> None:
        try:
            candidates = await predict_candidates(
                question,
                page,
                self.policy,
                draft_client=self.draft_client,
                rng=self.rng,
                peek_next_action=(lambda: peeked) if self.policy.strategy == "oracle" else None,
            )
        except asyncio.CancelledError:
            raise
        except Exception:
            candidates = []
        round_.candidates = candidates
        fetches = [
            asyncio.ensure_future(self._fetch_candidate(round_, i, action))
            for i, action in enumerate(candidates)
        ]
        for task in fetches:
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)
        if fetches:
            await asyncio.gather(*fetches, return_exceptions=True)

    async def _fetch_candidate(self, round_: SpeculationRound, index: int, action: Action) -> None:
        key = cache_key_of(action)
        outcome = self.cache.lookup(key, count_stats=False)
        if not isinstance(outcome, Miss):
            round_.outcomes[index] = SpeculationRound.ALREADY_CACHED
            return
        claim = outcome.claim
        try:
            async with self._semaphore:
                observation = await self.environment.fetch(action)
        except asyncio.CancelledError:
            self.cache.abort(claim)
            round_.outcomes[index] = SpeculationRound.CANCELLED
            raise
        except Exception:
            self.cache.abort(claim)
            round_.outcomes[index] = SpeculationRound.FAILED
            return
        self.cache.fulfill(claim, observation, inserted_by="speculative")
        round_.outcomes[index] = SpeculationRound.CACHED

    async def shutdown(self) -> None:
        """Cancel outstanding fetches at episode end."""
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
