"""Core domain vocabulary: actions, observations, cache keys, trajectory records.

Everything here is an immutable value object safe to share between the agent
loop and speculative workers. Serialization targets the line-delimited JSON
trace format and round-trips exactly.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional
from urllib.parse import urlsplit, urlunsplit

from .errors import MalformedURLError

VISIT_PAGE = "visit_page"

DEFAULT_CONTENT_BUDGET = 32 * 1024  # bytes of extracted page text kept per observation


def canonicalize(url: str) -> str:
    """Normalize an absolute http(s) URL so equal pages produce equal keys.

    Lowercases scheme and host, strips fragments and default ports, resolves
    "." / ".." path segments, and removes trailing slashes on non-root paths.
    Idempotent; query strings are preserved.
    """
    parts = urlsplit(url.strip())
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https"):
        raise MalformedURLError(f"not an absolute http(s) URL: {url!r}")
    if not parts.netloc:
        raise MalformedURLError(f"missing host: {url!r}")
    host = parts.hostname or ""
    host = host.lower()
    port = parts.port
    if port is not None and port != {"http": 80, "https": 443}[scheme]:
        netloc = f"{host}:{port}"
    else:
        netloc = host
    path = parts.path or "/"
    # RFC 3986 dot-segment removal; normpath also collapses empty segments.
    path = posixpath.normpath(path)
    if path == ".":
        path = "/"
    # normpath strips the trailing slash already; keep root as "/".
    return urlunsplit((scheme, netloc, path, parts.query, ""))


def normalize_label(label: str) -> str:
    """Case-fold and collapse whitespace in a button label."""
    return " ".join(label.split()).casefold()


class ObservationSource(str, Enum):
    LIVE = "live"
    CACHE_HIT = "cache_hit"
    JOINED_IN_FLIGHT = "joined_in_flight"
    NONE = "none"


@dataclass(frozen=True)
class Action:
    """One environment-affecting decision taken from a page."""

    kind: str
    argument: str
    origin_state: str

    def __post_init__(self):
        if self.kind != VISIT_PAGE:
            raise ValueError(f"unsupported action kind: {self.kind!r}")
        if not self.argument.strip():
            raise ValueError("action argument is empty")
        object.__setattr__(self, "origin_state", canonicalize(self.origin_state))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "argument": self.argument,
            "origin_state": self.origin_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        return cls(kind=d["kind"], argument=d["argument"], origin_state=d["origin_state"])


@dataclass(frozen=True)
class CacheKey:
    """Pure function of an Action: (origin page, kind, normalized argument)."""

    origin_state: str
    kind: str
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "origin_state": self.origin_state,
            "kind": self.kind,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheKey":
        return cls(d["origin_state"], d["kind"], d["fingerprint"])


def cache_key_of(action: Action) -> CacheKey:
    return CacheKey(
        origin_state=action.origin_state,
        kind=action.kind,
        fingerprint=normalize_label(action.argument),
    )


@dataclass(frozen=True)
class Observation:
    """The environment's response to an action."""

    content: str
    buttons: tuple[str, ...]
    resolved_url: str
    fetch_latency: float

    def __post_init__(self):
        if self.fetch_latency < 0:
            raise ValueError("fetch_latency must be >= 0")
        seen = set()
        deduped = []
        for b in self.buttons:
            if b not in seen:
                seen.add(b)
                deduped.append(b)
        object.__setattr__(self, "buttons", tuple(deduped))

    def to_dict(self) -> dict:
        return {
            "content": self.content,
            "buttons": list(self.buttons),
            "resolved_url": self.resolved_url,
            "fetch_latency": self.fetch_latency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            content=d["content"],
            buttons=tuple(d["buttons"]),
            resolved_url=d["resolved_url"],
            fetch_latency=d["fetch_latency"],
        )


@dataclass(frozen=True)
class TaskSpec:
    id: str
    question: str
    root_url: str
    reference_answer: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "root_url", canonicalize(self.root_url))

    def to_dict(self) -> dict:
        d = {"id": self.id, "question": self.question, "root_url": self.root_url}
        if self.reference_answer is not None:
            d["answer"] = self.reference_answer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            id=d["id"],
            question=d["question"],
            root_url=d["root_url"],
            reference_answer=d.get("answer"),
        )


@dataclass(frozen=True)
class EvaluatorVerdict:
    judge: bool
    answer: Optional[str] = None

    def __post_init__(self):
        if self.judge and self.answer is None:
            raise ValueError("judge=true requires an answer")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"judge": self.judge}
        if self.answer is not None:
            d["answer"] = self.answer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluatorVerdict":
        return cls(judge=d["judge"], answer=d.get("answer"))


@dataclass(frozen=True)
class Reflection:
    usefulness: bool
    information: Optional[str] = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"usefulness": self.usefulness}
        if self.information is not None:
            d["information"] = self.information
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Reflection":
        return cls(usefulness=d["usefulness"], information=d.get("information"))


@dataclass(frozen=True)
class IterationMetrics:
    """Wall-clock decomposition of one iteration.

    total >= model_latency + env_wait; the residual is framework overhead.
    """

    model_latency: float
    env_wait: float
    overhead: float
    total: float

    def to_dict(self) -> dict:
        return {
            "model_latency": self.model_latency,
            "env_wait": self.env_wait,
            "overhead": self.overhead,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationMetrics":
        return cls(d["model_latency"], d["env_wait"], d["overhead"], d["total"])


@dataclass(frozen=True)
class TrajectoryStep:
    """One Reflexion iteration. action is None when the model emitted its
    final answer directly, in which case no observation was taken."""

    iteration_index: int
    thought: str
    action: Optional[Action]
    observation_source: ObservationSource
    observation: Optional[Observation]
    reflection: Optional[Reflection]
    evaluator_verdict: Optional[EvaluatorVerdict]
    metrics: IterationMetrics
    final_answer: Optional[str] = None

    def __post_init__(self):
        if (self.action is None) != (self.observation_source is ObservationSource.NONE):
            raise ValueError("observation_source must be 'none' iff action is absent")

    def to_dict(self) -> dict:
        return {
            "iteration_index": self.iteration_index,
            "thought": self.thought,
            "action": self.action.to_dict() if self.action else None,
            "observation_source": self.observation_source.value,
            "observation": self.observation.to_dict() if self.observation else None,
            "reflection": self.reflection.to_dict() if self.reflection else None,
            "evaluator_verdict": (
                self.evaluator_verdict.to_dict() if self.evaluator_verdict else None
            ),
            "metrics": self.metrics.to_dict(),
            "final_answer": self.final_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        return cls(
            iteration_index=d["iteration_index"],
            thought=d["thought"],
            action=Action.from_dict(d["action"]) if d.get("action") else None,
            observation_source=ObservationSource(d["observation_source"]),
            observation=(
                Observation.from_dict(d["observation"]) if d.get("observation") else None
            ),
            reflection=Reflection.from_dict(d["reflection"]) if d.get("reflection") else None,
            evaluator_verdict=(
                EvaluatorVerdict.from_dict(d["evaluator_verdict"])
                if d.get("evaluator_verdict")
                else None
            ),
            metrics=IterationMetrics.from_dict(d["metrics"]),
            final_answer=d.get("final_answer"),
        )


def load_tasks(path) -> list[TaskSpec]:
    """Read a task file: one JSON object per line (id, question, root_url, answer?)."""
    import json

    tasks = []
    seen_ids = set()
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            task = TaskSpec.from_dict(json.loads(line))
            if task.id in seen_ids:
                raise ValueError(f"duplicate task id: {task.id}")
            seen_ids.add(task.id)
            tasks.append(task)
    return tasks
