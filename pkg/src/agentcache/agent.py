"""Reflexion-based agent loop.

Each iteration: launch a speculation round (non-blocking), ask the target
model for an action, satisfy it from the cache or the live environment,
self-reflect to accumulate useful information, then let the evaluator decide
termination. The loop shares no mutable state with the speculator other
than the cache, so enabling speculation can change timing but never the
trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .cache import ActionObservationCache, Hit, InFlight
from .clock import Clock, WallClock
from .environment import Environment
from .errors import FetchError, TransportError, UnparseableReplyError
from .model import (
    Action,
    IterationMetrics,
    Observation,
    ObservationSource,
    TaskSpec,
    TrajectoryStep,
    cache_key_of,
)
from .modelclient import (
    ChatClient,
    ChatRequest,
    FinalAnswer,
    TOOL_DESCRIPTION,
    TOOL_NAMES,
    parse_evaluator,
    parse_reflection,
    parse_target_reply,
    render,
)
from .speculator import Speculator

DEFAULT_MAX_ITERATIONS = 10

REPROMPT_REMINDER = (
    "YOU MUST TAKE ACTION AT EVERY STEP UNLESS YOU ARE PRODUCING YOUR FINAL "
    "ANSWER. WHEN YOU TAKE ACTION, YOU MUST USE THE TOOL WITH THE CORRECT "
    "FORMAT AND OUTPUT THE ACTION INPUT. THEREFORE, YOU MUST OUTPUT AN ACTION "
    "AND AN ACTION INPUT."
)


class Termination(str, Enum):
    EVALUATOR_JUDGED = "evaluator_judged"
    FINAL_ANSWER_EMITTED = "final_answer_emitted"
    ITERATION_CAP = "iteration_cap"
    UNRECOVERABLE_ERROR = "unrecoverable_error"


@dataclass
class EpisodeState:
    task: TaskSpec
    current_page: Observation
    accumulated_information: list[str] = field(default_factory=list)
    steps: list[TrajectoryStep] = field(default_factory=list)
    iteration_index: int = 0
    transcripts: list[dict] = field(default_factory=list)
    answer: Optional[str] = None
    termination: Optional[Termination] = None

    @property
    def terminal(self) -> bool:
        return self.termination is not None


@dataclass
class EpisodeResult:
    task: TaskSpec
    answer: Optional[str]
    termination: Termination
    steps: list[TrajectoryStep]
    root_observation: Observation
    cache_stats: dict
    transcripts: list[dict]

    def __post_init__(self):
        has_answer = self.answer is not None
        expects_answer = self.termination in (
            Termination.EVALUATOR_JUDGED,
            Termination.FINAL_ANSWER_EMITTED,
        )
        if has_answer != expects_answer:
            raise ValueError("answer must be present iff the episode concluded")


def page_summary(page: Observation) -> str:
    buttons = ", ".join(page.buttons)
    return f"URL: {page.resolved_url}\nButtons: [{buttons}]\nContent: {page.content}"


class AgentLoop:
    def __init__(
        self,
        environment: Environment,
        cache: ActionObservationCache,
        target_client: ChatClient,
        clock: Optional[Clock] = None,
        speculator: Optional[Speculator] = None,
        max_iterations: int = DEFAULT_MAX_ITERATIONS,
    ):
        if max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        self.environment = environment
        self.cache = cache
        self.target = target_client
        self.clock = clock or WallClock()
        self.speculator = speculator
        self.max_iterations = max_iterations

    async def run_episode(self, task: TaskSpec) -> EpisodeResult:
        # The root page load is a plain live fetch, outside hit accounting.
        root_observation = await self.environment.fetch_url(task.root_url)
        state = EpisodeState(task=task, current_page=root_observation)
        try:
            while not state.terminal and state.iteration_index < self.max_iterations:
                await self.step(state)
            if state.termination is None:
                state.termination = Termination.ITERATION_CAP
        finally:
            if self.speculator is not None:
                await self.speculator.shutdown()
        return EpisodeResult(
            task=task,
            answer=state.answer,
            termination=state.termination,
            steps=state.steps,
            root_observation=root_observation,
            cache_stats=self.cache.stats().to_dict(),
            transcripts=state.transcripts,
        )

    async def step(self, state: EpisodeState) -> Optional[TrajectoryStep]:
        """One Reflexion iteration; returns None on unrecoverable failure."""
        if state.terminal:
            raise RuntimeError("episode already terminated")
        state.iteration_index += 1
        iteration = state.iteration_index
        transcript: dict = {"iteration_index": iteration}
        state.transcripts.append(transcript)
        started = self.clock.now()
        model_latency = 0.0
        env_wait = 0.0

        if self.speculator is not None:
            self.speculator.launch(iteration, state.task.question, state.current_page)

        try:
            decision, model_latency = await self._decide_action(state, transcript)
        except TransportError:
            state.termination = Termination.UNRECOVERABLE_ERROR
            return None
        except UnparseableReplyError:
            state.termination = Termination.UNRECOVERABLE_ERROR
            return None

        if isinstance(decision, FinalAnswer):
            total = self.clock.now() - started
            step = TrajectoryStep(
                iteration_index=iteration,
                thought="",
                action=None,
                observation_source=ObservationSource.NONE,
                observation=None,
                reflection=None,
                evaluator_verdict=None,
                metrics=IterationMetrics(
                    model_latency=model_latency,
                    env_wait=0.0,
                    overhead=total - model_latency,
                    total=total,
                ),
                final_answer=decision.answer,
            )
            state.steps.append(step)
            state.answer = decision.answer
            state.termination = Termination.FINAL_ANSWER_EMITTED
            return step

        action = decision.action
        observation, source, env_wait = await self._observe(action)
        state.current_page = observation

        try:
            reflection, latency = await self._reflect(state, observation, transcript)
            model_latency += latency
            if reflection.usefulness and reflection.information:
                state.accumulated_information.append(reflection.information)
            verdict, latency = await self._evaluate(state, transcript)
            model_latency += latency
        except TransportError:
            state.termination = Termination.UNRECOVERABLE_ERROR
            return None

        total = self.clock.now() - started
        step = TrajectoryStep(
            iteration_index=iteration,
            thought=decision.thought,
            action=action,
            observation_source=source,
            observation=observation,
            reflection=reflection,
            evaluator_verdict=verdict,
            metrics=IterationMetrics(
                model_latency=model_latency,
                env_wait=env_wait,
                overhead=total - model_latency - env_wait,
                total=total,
            ),
        )
        state.steps.append(step)
        if verdict.judge:
            state.answer = verdict.answer
            state.termination = Termination.EVALUATOR_JUDGED
        return step

    async def _decide_action(self, state: EpisodeState, transcript: dict):
        prompt = render(
            "target_action",
            tool_description=TOOL_DESCRIPTION,
            tool_names=TOOL_NAMES,
            query=state.task.question,
            observation=page_summary(state.current_page),
        )
        origin = state.current_page.resolved_url
        response = await self.target.complete(ChatRequest.user(prompt))
        transcript["action_reply"] = response.text
        transcript["action_latency"] = response.latency
        transcript["reprompted"] = False
        latency = response.latency
        try:
            return parse_target_reply(response.text, origin), latency
        except UnparseableReplyError:
            # One corrective re-prompt; a second malformed reply aborts.
            retry_prompt = prompt + "\n" + REPROMPT_REMINDER
            response = await self.target.complete(ChatRequest.user(retry_prompt))
            transcript["action_reply"] = response.text
            transcript["action_latency"] = response.latency
            transcript["reprompted"] = True
            latency += response.latency
            return parse_target_reply(response.text, origin), latency

    async def _observe(self, action: Action):
        """Satisfy the action from the cache or the live environment."""
        key = cache_key_of(action)
        env_wait = 0.0
        while True:
            outcome = self.cache.lookup(key)
            if isinstance(outcome, Hit):
                return outcome.observation, ObservationSource.CACHE_HIT, env_wait
            if isinstance(outcome, InFlight):
                start = self.clock.now()
                observation = await outcome.wait()
                env_wait += self.clock.now() - start
                if observation is None:
                    continue  # owner aborted; retry to obtain our own claim
                return observation, ObservationSource.JOINED_IN_FLIGHT, env_wait
            claim = outcome.claim
            start = self.clock.now()
            try:
                observation = await self.environment.fetch(action)
            except FetchError as exc:
                self.cache.abort(claim)
                env_wait += self.clock.now() - start
                # Failed live fetches are surfaced as an error observation and
                # never cached, so a later retry can still succeed.
                observation = Observation(
                    content=f"ERROR: {exc}",
                    buttons=(),
                    resolved_url=action.origin_state,
                    fetch_latency=self.clock.now() - start,
                )
                return observation, ObservationSource.LIVE, env_wait
            env_wait += self.clock.now() - start
            self.cache.fulfill(claim, observation, inserted_by="live")
            return observation, ObservationSource.LIVE, env_wait

    async def _reflect(self, state: EpisodeState, observation: Observation, transcript: dict):
        prompt = render(
            "target_reflection",
            query=state.task.question,
            observation=page_summary(observation),
        )
        response = await self.target.complete(ChatRequest.user(prompt))
        transcript["reflection_reply"] = response.text
        transcript["reflection_latency"] = response.latency
        try:
            reflection = parse_reflection(response.text)
        except Exception:
            from .model import Reflection

            reflection = Reflection(usefulness=False)
        return reflection, response.latency

    async def _evaluate(self, state: EpisodeState, transcript: dict):
        prompt = render(
            "target_evaluator",
            query=state.task.question,
            accumulated_information="\n".join(state.accumulated_information),
        )
        response = await self.target.complete(ChatRequest.user(prompt))
        transcript["evaluator_reply"] = response.text
        transcript["evaluator_latency"] = response.latency
        try:
            verdict = parse_evaluator(response.text)
        except Exception:
            from .model import EvaluatorVerdict

            verdict = EvaluatorVerdict(judge=False)
        return verdict, response.latency
