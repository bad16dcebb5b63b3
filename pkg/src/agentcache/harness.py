"""Experiment drivers: benchmark runs, trace persistence, replay, reports.

Traces are line-delimited JSON (header, one object per trajectory step,
summary) with full model transcripts, so every report aggregate can be
recomputed from traces alone and any episode can be replayed offline.
Mode-comparison runs execute speculation-off first and reuse its transcripts
as the scripted target for the speculation-on runs, so paired episodes
differ only in speculation policy.
"""

from __future__ import annotations

import asyncio
import csv
import json
import math
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .agent import AgentLoop, EpisodeResult, Termination
from .cache import ActionObservationCache
from .clock import Clock, VirtualClock, WallClock
from .environment import (
    Environment,
    PageGraph,
    SimEnvironment,
    WebEnvironment,
    build_graph,
    build_synthetic_graph,
)
from .errors import ConfigError, DegenerateInputError, FetchError, TranscriptDivergenceError
from .model import (
    Action,
    Observation,
    TaskSpec,
    TrajectoryStep,
    cache_key_of,
    load_tasks,
)
from .modelclient import (
    ActionDecision,
    ChatClient,
    OpenAIChatClient,
    ScriptedModel,
    ScriptedReply,
    parse_target_reply,
)
from .speculator import SpeculationPolicy, Speculator

MODE_ALIASES = {
    "off": "off",
    "draft": "draft_model",
    "draft_model": "draft_model",
    "random": "uniform_random",
    "uniform_random": "uniform_random",
    "oracle": "oracle",
}


# ---------------------------------------------------------------------------
# Statistics


def cv(samples: list[float]) -> float:
    """Coefficient of variation: population stddev / mean, in percent."""
    if len(samples) < 2:
        raise DegenerateInputError("cv requires at least 2 samples")
    mean = sum(samples) / len(samples)
    if mean <= 0:
        raise DegenerateInputError("cv requires a positive mean")
    variance = sum((x - mean) ** 2 for x in samples) / len(samples)
    return math.sqrt(variance) / mean * 100.0


def _pstdev(samples: list[float]) -> float:
    if not samples:
        return 0.0
    mean = sum(samples) / len(samples)
    return math.sqrt(sum((x - mean) ** 2 for x in samples) / len(samples))


def _mean(samples: list[float]) -> float:
    return sum(samples) / len(samples) if samples else 0.0


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    task_file: str
    runs_per_task: int = 5
    max_iterations: int = 10
    modes: list[str] = field(default_factory=lambda: ["off", "draft_model"])
    fan_out: int = 3
    max_concurrent_fetches: int = 4
    oracle_accuracy: float = 1.0
    cache_capacity: int = 256
    environment: dict = field(default_factory=dict)
    target_model: dict = field(default_factory=dict)
    draft_model: dict = field(default_factory=dict)
    time_scale: float = 0.01
    virtual_clock: bool = False
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        speculation = raw.get("speculation", {})
        models = raw.get("models", {})
        config = cls(
            task_file=raw.get("task_file", ""),
            runs_per_task=raw.get("runs_per_task", 5),
            max_iterations=raw.get("max_iterations", 10),
            modes=list(raw.get("modes", ["off", "draft_model"])),
            fan_out=speculation.get("fan_out", 3),
            max_concurrent_fetches=speculation.get("max_concurrent_fetches", 4),
            oracle_accuracy=speculation.get("oracle_accuracy", 1.0),
            cache_capacity=raw.get("cache_capacity", 256),
            environment=raw.get("environment", {}),
            target_model=models.get("target", {}),
            draft_model=models.get("draft", {}),
            time_scale=raw.get("time_scale", 0.01),
            virtual_clock=raw.get("virtual_clock", False),
            output_dir=raw.get("output_dir", "out"),
            seed=raw.get("seed", 0),
        )
        return config

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def validate(self) -> "RunConfig":
        if self.runs_per_task < 1:
            raise ConfigError("runs_per_task", "must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations", "must be >= 1")
        if not self.task_file:
            raise ConfigError("task_file", "is required")
        if not Path(self.task_file).exists():
            raise ConfigError("task_file", f"not found: {self.task_file}")
        if not self.modes:
            raise ConfigError("modes", "must list at least one mode")
        for mode in self.modes:
            if mode not in MODE_ALIASES:
                raise ConfigError("modes", f"unknown mode: {mode!r}")
        env_type = self.environment.get("type", "sim")
        if env_type not in ("sim", "web"):
            raise ConfigError("environment.type", f"unknown type: {env_type!r}")
        if env_type == "sim":
            graph = self.environment.get("graph")
            if graph and not Path(graph).exists():
                raise ConfigError("environment.graph", f"not found: {graph}")
        return self

    def canonical_modes(self) -> list[str]:
        seen = []
        for mode in self.modes:
            canonical = MODE_ALIASES[mode]
            if canonical not in seen:
                seen.append(canonical)
        return seen


def make_clock(config: RunConfig) -> Clock:
    return VirtualClock() if config.virtual_clock else WallClock()


def make_environment(config: RunConfig, clock: Clock, graph: Optional[PageGraph] = None) -> Environment:
    env = config.environment
    if env.get("type", "sim") == "web":
        return WebEnvironment(
            clock=clock,
            timeout=env.get("timeout", 30.0),
            user_agent=env.get("user_agent", "agentcache/0.1"),
            per_host_delay=env.get("per_host_delay", 1.0),
            content_budget=env.get("content_budget", 32 * 1024),
        )
    if graph is None:
        graph = load_graph(config)
    return SimEnvironment(graph, clock=clock, time_scale=config.time_scale)


def load_graph(config: RunConfig) -> PageGraph:
    env = config.environment
    if env.get("graph"):
        return build_graph(env["graph"])
    synthetic = env.get("synthetic", {})
    return build_synthetic_graph(
        branching=synthetic.get("branching", 81),
        depth=synthetic.get("depth", 1),
        seed=synthetic.get("seed", config.seed),
    )


def make_model(spec: dict, clock: Clock) -> ChatClient:
    kind = spec.get("type", "openai")
    if kind == "scripted":
        path = spec.get("path")
        if not path:
            raise ConfigError("models", "scripted model requires a path")
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        entries = raw["replies"] if isinstance(raw, dict) else raw
        replies = [
            ScriptedReply(
                text=e["text"], latency=e.get("latency", 0.0), match=e.get("match")
            )
            for e in entries
        ]
        return ScriptedModel(replies, clock=clock, sequential=spec.get("sequential", True))
    if kind == "openai":
        if not spec.get("base_url"):
            raise ConfigError("models", "openai model requires base_url")
        return OpenAIChatClient(
            base_url=spec["base_url"],
            model=spec.get("model", ""),
            api_key_env=spec.get("api_key_env"),
            clock=clock,
            retries=spec.get("retries", 2),
            extra_fields=spec.get("extra_fields"),
        )
    raise ConfigError("models", f"unknown model type: {kind!r}")


# ---------------------------------------------------------------------------
# Episode execution


def scripted_peek(model: ScriptedModel):
    """Oracle peek over a sequential scripted target: parse the upcoming
    action reply without consuming it."""

    def peek(page: Observation) -> Optional[Action]:
        reply = model.peek()
        if reply is None:
            return None
        try:
            parsed = parse_target_reply(reply.text, page.resolved_url)
        except Exception:
            return None
        return parsed.action if isinstance(parsed, ActionDecision) else None

    return peek


async def run_one_episode(
    task: TaskSpec,
    mode: str,
    target: ChatClient,
    environment: Environment,
    clock: Clock,
    *,
    draft: Optional[ChatClient] = None,
    cache_capacity: int = 256,
    max_iterations: int = 10,
    fan_out: int = 3,
    max_concurrent_fetches: int = 4,
    oracle_accuracy: float = 1.0,
    rng_seed: int = 0,
    peek=None,
) -> EpisodeResult:
    cache = ActionObservationCache(capacity=cache_capacity)
    speculator = None
    if mode != "off":
        policy = SpeculationPolicy(
            fan_out=fan_out,
            strategy=mode,
            max_concurrent_fetches=max_concurrent_fetches,
            oracle_accuracy=oracle_accuracy,
        )
        if mode == "oracle" and peek is None and isinstance(target, ScriptedModel):
            peek = scripted_peek(target)
        speculator = Speculator(
            cache,
            environment,
            policy,
            draft_client=draft,
            rng=random.Random(rng_seed),
            peek_next_action=peek,
        )
    loop = AgentLoop(
        environment,
        cache,
        target,
        clock=clock,
        speculator=speculator,
        max_iterations=max_iterations,
    )
    return await loop.run_episode(task)


def transcripts_to_replies(transcripts: list[dict]) -> list[ScriptedReply]:
    """Flatten per-iteration transcripts into the sequential reply stream a
    scripted target consumes: action, then reflection/evaluator if present."""
    replies = []
    for t in transcripts:
        replies.append(ScriptedReply(text=t["action_reply"], latency=t["action_latency"]))
        if "reflection_reply" in t:
            replies.append(
                ScriptedReply(text=t["reflection_reply"], latency=t["reflection_latency"])
            )
        if "evaluator_reply" in t:
            replies.append(
                ScriptedReply(text=t["evaluator_reply"], latency=t["evaluator_latency"])
            )
    return replies


# ---------------------------------------------------------------------------
# Trace files


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def write_trace(
    path,
    result: EpisodeResult,
    mode: str,
    run_index: int,
    config_snapshot: dict,
    clock: Clock,
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "type": "header",
            "task": result.task.to_dict(),
            "mode": mode,
            "run_index": run_index,
            "config": config_snapshot,
            "root_observation": result.root_observation.to_dict(),
            "started_at": _iso(clock.wall_time()),
        }
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for step, transcript in zip(result.steps, result.transcripts):
            record = {
                "type": "step",
                "timestamp": _iso(clock.wall_time()),
                "step": step.to_dict(),
                "transcript": transcript,
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
        summary = {
            "type": "summary",
            "answer": result.answer,
            "termination": result.termination.value,
            "cache_stats": result.cache_stats,
            "finished_at": _iso(clock.wall_time()),
        }
        f.write(json.dumps(summary, ensure_ascii=False) + "\n")


@dataclass
class Trace:
    header: dict
    steps: list[dict]
    summary: dict

    @property
    def task(self) -> TaskSpec:
        return TaskSpec.from_dict(self.header["task"])

    @property
    def mode(self) -> str:
        return self.header["mode"]

    @property
    def trajectory_steps(self) -> list[TrajectoryStep]:
        return [TrajectoryStep.from_dict(s["step"]) for s in self.steps]

    @property
    def transcripts(self) -> list[dict]:
        return [s["transcript"] for s in self.steps]


def read_trace(path) -> Trace:
    header = None
    steps = []
    summary = None
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record["type"] == "header":
                header = record
            elif record["type"] == "step":
                steps.append(record)
            elif record["type"] == "summary":
                summary = record
    if header is None or summary is None:
        raise ValueError(f"incomplete trace file: {path}")
    return Trace(header=header, steps=steps, summary=summary)


# ---------------------------------------------------------------------------
# cmd_run


@dataclass
class RunReport:
    episodes: list[dict]
    aggregates: dict

    def to_dict(self) -> dict:
        return {"episodes": self.episodes, "aggregates": self.aggregates}

    @property
    def ok(self) -> bool:
        return all(
            e["termination"] != Termination.UNRECOVERABLE_ERROR.value
            for e in self.episodes
        )


def cmd_run(config: RunConfig) -> RunReport:
    config.validate()
    tasks = load_tasks(config.task_file)
    out_dir = Path(config.output_dir)
    trace_dir = out_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)

    clock = make_clock(config)
    modes = config.canonical_modes()
    # Paired-run discipline: the off run always executes first and its
    # transcripts drive the scripted target for the speculation-on runs.
    ordered = ["off"] + [m for m in modes if m != "off"]

    graph = load_graph(config) if config.environment.get("type", "sim") == "sim" else None
    config_snapshot = {
        "seed": config.seed,
        "time_scale": config.time_scale,
        "virtual_clock": config.virtual_clock,
        "cache_capacity": config.cache_capacity,
        "max_iterations": config.max_iterations,
        "fan_out": config.fan_out,
        "oracle_accuracy": config.oracle_accuracy,
    }

    async def run_all():
        for task in tasks:
            for run_index in range(config.runs_per_task):
                off_transcripts = None
                for mode in ordered:
                    rng_seed = _episode_seed(config.seed, task.id, mode, run_index)
                    environment = make_environment(config, clock, graph)
                    if mode == "off" or off_transcripts is None:
                        target = make_model(config.target_model, clock)
                    else:
                        target = ScriptedModel(
                            transcripts_to_replies(off_transcripts), clock=clock
                        )
                    draft = None
                    if mode == "draft_model":
                        draft = make_model(config.draft_model, clock)
                    result = await run_one_episode(
                        task,
                        mode,
                        target,
                        environment,
                        clock,
                        draft=draft,
                        cache_capacity=config.cache_capacity,
                        max_iterations=config.max_iterations,
                        fan_out=config.fan_out,
                        max_concurrent_fetches=config.max_concurrent_fetches,
                        oracle_accuracy=config.oracle_accuracy,
                        rng_seed=rng_seed,
                    )
                    if mode == "off":
                        off_transcripts = result.transcripts
                    if mode in modes:
                        trace_path = trace_dir / f"{task.id}__{mode}__run{run_index}.jsonl"
                        write_trace(
                            trace_path, result, mode, run_index, config_snapshot, clock
                        )
                    await environment.close()

    asyncio.run(clock.drive(run_all()))
    report = build_report(trace_dir)
    write_report(report, out_dir)
    return report


def _episode_seed(base: int, task_id: str, mode: str, run_index: int) -> int:
    return random.Random(f"{base}|{task_id}|{mode}|{run_index}").getrandbits(32)


# ---------------------------------------------------------------------------
# Reports


def episode_summary(trace: Trace) -> dict:
    steps = trace.trajectory_steps
    lookups = hits = joined = 0
    model_latencies = []
    env_waits = []
    totals = []
    for step in steps:
        if step.action is not None:
            lookups += 1
            if step.observation_source.value == "cache_hit":
                hits += 1
            elif step.observation_source.value == "joined_in_flight":
                joined += 1
        model_latencies.append(step.metrics.model_latency)
        env_waits.append(step.metrics.env_wait)
        totals.append(step.metrics.total)
    return {
        "task_id": trace.task.id,
        "mode": trace.mode,
        "run_index": trace.header["run_index"],
        "iterations": len(steps),
        "termination": trace.summary["termination"],
        "answer": trace.summary["answer"],
        "lookups": lookups,
        "hits": hits,
        "joined_in_flight": joined,
        "hit_rate": hits / lookups if lookups else None,
        "mean_model_latency": _mean(model_latencies),
        "mean_env_wait": _mean(env_waits),
        "total_env_wait": sum(env_waits),
        "mean_iteration_total": _mean(totals),
    }


def build_report(trace_dir) -> RunReport:
    """Pure function of the trace files in a directory."""
    trace_dir = Path(trace_dir)
    traces = [read_trace(p) for p in sorted(trace_dir.glob("*.jsonl"))]
    episodes = [episode_summary(t) for t in traces]

    by_mode: dict[str, list[dict]] = {}
    for episode in episodes:
        by_mode.setdefault(episode["mode"], []).append(episode)

    step_metrics: dict[str, dict[str, list[float]]] = {}
    for trace in traces:
        bucket = step_metrics.setdefault(
            trace.mode, {"model": [], "env": [], "total": []}
        )
        for step in trace.trajectory_steps:
            bucket["model"].append(step.metrics.model_latency)
            bucket["env"].append(step.metrics.env_wait)
            bucket["total"].append(step.metrics.total)

    off_env = {
        (e["task_id"], e["run_index"]): e["total_env_wait"]
        for e in by_mode.get("off", [])
    }

    aggregates: dict[str, dict] = {}
    for mode, mode_episodes in by_mode.items():
        metrics = step_metrics[mode]
        lookups = sum(e["lookups"] for e in mode_episodes)
        hits = sum(e["hits"] for e in mode_episodes)
        joined = sum(e["joined_in_flight"] for e in mode_episodes)
        paired_off = 0.0
        paired_mode = 0.0
        for e in mode_episodes:
            key = (e["task_id"], e["run_index"])
            if key in off_env:
                paired_off += off_env[key]
                paired_mode += e["total_env_wait"]
        speedup = None
        if mode != "off" and paired_off > 0:
            speedup = (paired_off / paired_mode) if paired_mode > 0 else None
        totals = metrics["total"]
        aggregates[mode] = {
            "episodes": len(mode_episodes),
            "iterations": len(totals),
            "hit_rate": hits / lookups if lookups else None,
            "joined_rate": joined / lookups if lookups else None,
            "mean_model_latency": _mean(metrics["model"]),
            "stddev_model_latency": _pstdev(metrics["model"]),
            "mean_env_wait": _mean(metrics["env"]),
            "stddev_env_wait": _pstdev(metrics["env"]),
            "mean_iteration_total": _mean(totals),
            "cv_iteration_total_pct": cv(totals) if len(totals) >= 2 and _mean(totals) > 0 else None,
            "paired_env_wait_off": paired_off if mode != "off" else None,
            "paired_env_wait_mode": paired_mode if mode != "off" else None,
            "env_wait_speedup_vs_off": speedup,
        }
    return RunReport(episodes=episodes, aggregates=aggregates)


def write_report(report: RunReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, ensure_ascii=False, indent=2)
    if report.episodes:
        with open(out_dir / "episodes.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(report.episodes[0].keys()))
            writer.writeheader()
            writer.writerows(report.episodes)


# ---------------------------------------------------------------------------
# Replay


class ReplayEnvironment(Environment):
    """Serves recorded observations; no network, latency replayed on the clock."""

    def __init__(self, trace: Trace, clock: Clock):
        self.clock = clock
        self.fetch_count = 0
        root = Observation.from_dict(trace.header["root_observation"])
        self._by_url = {root.resolved_url: root}
        self._by_key = {}
        for step in trace.trajectory_steps:
            if step.action is not None and step.observation is not None:
                self._by_key[cache_key_of(step.action)] = step.observation
                self._by_url.setdefault(step.observation.resolved_url, step.observation)

    async def fetch_url(self, url: str) -> Observation:
        observation = self._by_url.get(url)
        if observation is None:
            raise FetchError(url, "URL not present in trace")
        self.fetch_count += 1
        await self.clock.sleep(observation.fetch_latency)
        return observation

    async def fetch(self, action: Action) -> Observation:
        observation = self._by_key.get(cache_key_of(action))
        if observation is None:
            raise FetchError(action.origin_state, "action not present in trace")
        self.fetch_count += 1
        await self.clock.sleep(observation.fetch_latency)
        return observation


def _comparable(step: TrajectoryStep) -> dict:
    d = step.to_dict()
    return {k: d[k] for k in ("thought", "action", "reflection",
                              "evaluator_verdict", "final_answer")} | {
        "observation_content": d["observation"]["content"] if d["observation"] else None
    }


def cmd_replay(trace_path, policy_override: Optional[str] = None) -> EpisodeResult:
    """Re-execute an episode from its trace; asserts an identical trajectory.

    policy_override swaps the speculation mode (e.g. draft_model -> oracle)
    to recompute hypothetical hit rates offline; the trajectory must still
    match since speculation never alters it.
    """
    trace = read_trace(trace_path)
    clock = VirtualClock()
    environment = ReplayEnvironment(trace, clock)
    target = ScriptedModel(transcripts_to_replies(trace.transcripts), clock=clock)
    mode = policy_override if policy_override is not None else trace.mode
    mode = MODE_ALIASES.get(mode, mode)
    if mode == "draft_model":
        # No draft transcript is kept; draft speculation degrades to no-ops.
        draft = ScriptedModel([], clock=clock, default=ScriptedReply(text=""))
    else:
        draft = None
    config = trace.header.get("config", {})

    async def run():
        return await run_one_episode(
            trace.task,
            mode,
            target,
            environment,
            clock,
            draft=draft,
            cache_capacity=config.get("cache_capacity", 256),
            max_iterations=config.get("max_iterations", 10),
            fan_out=config.get("fan_out", 3),
            oracle_accuracy=1.0 if policy_override else config.get("oracle_accuracy", 1.0),
            rng_seed=config.get("seed", 0),
        )

    result = asyncio.run(clock.drive(run()))

    recorded = trace.trajectory_steps
    if len(result.steps) != len(recorded):
        raise TranscriptDivergenceError(
            min(len(result.steps), len(recorded)) + 1,
            "step_count",
            len(recorded),
            len(result.steps),
        )
    for index, (new, old) in enumerate(zip(result.steps, recorded), start=1):
        new_cmp, old_cmp = _comparable(new), _comparable(old)
        for fieldname, old_value in old_cmp.items():
            if new_cmp[fieldname] != old_value:
                raise TranscriptDivergenceError(index, fieldname, old_value, new_cmp[fieldname])
    return result
