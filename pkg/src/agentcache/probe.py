"""Desk-scale endpoint latency probe.

Issues a fixed story prompt with a controlled output-token budget at a
scheduled interval and summarizes per-call latency (mean, stddev, CV,
percentiles). A max/min spread of 10x or more raises a variability warning.
"""

from __future__ import annotations

import asyncio
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .clock import Clock, WallClock
from .harness import cv
from .modelclient import ChatClient, ChatRequest

PROBE_PROMPT = (
    "Tell a story about Blackberry. Make the story detailed, with rich "
    "descriptions, character development, and dialogue. Aim for a story that "
    "would take at least {n} tokens to tell."
)

VARIABILITY_WARNING_RATIO = 10.0
DEFAULT_INTERVAL_SECONDS = 60.0


@dataclass
class ProbeSample:
    index: int
    ok: bool
    latency: Optional[float] = None
    error: Optional[str] = None


@dataclass
class ProbeResult:
    samples: list[ProbeSample] = field(default_factory=list)

    @property
    def latencies(self) -> list[float]:
        return [s.latency for s in self.samples if s.ok]

    def summary(self) -> dict:
        latencies = sorted(self.latencies)
        failed = sum(1 for s in self.samples if not s.ok)
        if not latencies:
            return {"samples": 0, "failed": failed}
        n = len(latencies)
        mean = sum(latencies) / n
        stddev = math.sqrt(sum((x - mean) ** 2 for x in latencies) / n)
        lo, hi = latencies[0], latencies[-1]
        summary = {
            "samples": n,
            "failed": failed,
            "mean": mean,
            "stddev": stddev,
            "cv_pct": cv(latencies) if n >= 2 and mean > 0 else None,
            "min": lo,
            "max": hi,
            "p50": _percentile(latencies, 0.50),
            "p95": _percentile(latencies, 0.95),
            "variability_warning": bool(lo > 0 and hi / lo >= VARIABILITY_WARNING_RATIO),
        }
        return summary


def _percentile(sorted_values: list[float], q: float) -> float:
    # Nearest-rank on a pre-sorted list.
    index = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[index]


async def run_probe(
    client: ChatClient,
    count: int,
    interval: float = DEFAULT_INTERVAL_SECONDS,
    max_tokens: int = 512,
    clock: Optional[Clock] = None,
) -> ProbeResult:
    """Per-call transport errors become failed samples, never abort the probe."""
    clock = clock or WallClock()
    request = ChatRequest.user(
        PROBE_PROMPT.format(n=max_tokens), max_tokens=max_tokens
    )
    result = ProbeResult()
    for index in range(count):
        if index:
            await clock.sleep(interval)
        try:
            response = await client.complete(request)
            result.samples.append(
                ProbeSample(index=index, ok=True, latency=response.latency)
            )
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            result.samples.append(ProbeSample(index=index, ok=False, error=str(exc)))
    return result


def write_probe_outputs(result: ProbeResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "probe_samples.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "ok", "latency_seconds", "error"])
        for s in result.samples:
            writer.writerow([s.index, int(s.ok), s.latency, s.error or ""])
    with open(out_dir / "probe_summary.json", "w", encoding="utf-8") as f:
        json.dump(result.summary(), f, indent=2)
