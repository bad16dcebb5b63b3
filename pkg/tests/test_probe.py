import csv
import json

import pytest

from agentcache.clock import VirtualClock
from agentcache.modelclient import ChatClient, ScriptedModel, ScriptedReply
from agentcache.probe import (
    DEFAULT_INTERVAL_SECONDS,
    PROBE_PROMPT,
    ProbeResult,
    ProbeSample,
    run_probe,
    write_probe_outputs,
)

from conftest import drive


def scripted(latencies, clock):
    return ScriptedModel([ScriptedReply("story", latency=l) for l in latencies], clock=clock)


class TestRunProbe:
    def test_collects_latencies_at_interval(self):
        clock = VirtualClock()
        client = scripted([0.2, 0.3, 0.25], clock)
        result = drive(clock, run_probe(client, count=3, interval=60.0, clock=clock))
        assert [s.latency for s in result.samples] == pytest.approx([0.2, 0.3, 0.25])
        # Two inter-sample waits plus the three calls themselves.
        assert clock.now() == pytest.approx(120.0 + 0.75)

    def test_prompt_carries_token_budget(self):
        captured = {}

        class Capture(ChatClient):
            async def complete(self, request):
                captured["prompt"] = request.prompt_text
                captured["max_tokens"] = request.max_tokens
                from agentcache.modelclient import ChatResponse

                return ChatResponse(text="s", latency=0.1)

        clock = VirtualClock()
        drive(clock, run_probe(Capture(), count=1, interval=0, max_tokens=256, clock=clock))
        assert captured["max_tokens"] == 256
        assert captured["prompt"] == PROBE_PROMPT.format(n=256)

    def test_failures_recorded_not_raised(self):
        class Flaky(ChatClient):
            def __init__(self):
                self.calls = 0

            async def complete(self, request):
                self.calls += 1
                if self.calls == 2:
                    raise OSError("connection reset")
                from agentcache.modelclient import ChatResponse

                return ChatResponse(text="s", latency=0.1)

        clock = VirtualClock()
        result = drive(clock, run_probe(Flaky(), count=3, interval=1.0, clock=clock))
        assert [s.ok for s in result.samples] == [True, False, True]
        assert result.samples[1].error == "connection reset"

    def test_default_interval_is_one_minute(self):
        assert DEFAULT_INTERVAL_SECONDS == 60.0


class TestSummary:
    def build(self, latencies, failed=0):
        result = ProbeResult()
        for i, l in enumerate(latencies):
            result.samples.append(ProbeSample(index=i, ok=True, latency=l))
        for i in range(failed):
            result.samples.append(
                ProbeSample(index=len(latencies) + i, ok=False, error="x")
            )
        return result

    def test_constant_latency_low_cv(self):
        summary = self.build([1.0] * 20).summary()
        assert summary["cv_pct"] == pytest.approx(0.0, abs=1e-9)
        assert summary["cv_pct"] < 5.0
        assert summary["variability_warning"] is False

    def test_stub_server_like_jitter_stays_under_5_percent(self):
        # A steady endpoint with small jitter must not trip any warning.
        latencies = [1.0 + 0.01 * (i % 5) for i in range(30)]
        summary = self.build(latencies).summary()
        assert summary["cv_pct"] < 5.0
        assert summary["variability_warning"] is False

    def test_warning_at_10x_spread(self):
        summary = self.build([0.1, 0.5, 1.0]).summary()
        assert summary["variability_warning"] is True
        assert summary["max"] / summary["min"] == pytest.approx(10.0)

    def test_no_warning_just_below_10x(self):
        summary = self.build([0.1, 0.5, 0.99]).summary()
        assert summary["variability_warning"] is False

    def test_percentiles_nearest_rank(self):
        latencies = [float(i) for i in range(1, 101)]
        summary = self.build(latencies).summary()
        assert summary["p50"] == 50.0
        assert summary["p95"] == 95.0
        assert summary["min"] == 1.0
        assert summary["max"] == 100.0

    def test_all_failed(self):
        summary = self.build([], failed=3).summary()
        assert summary == {"samples": 0, "failed": 3}

    def test_failed_counted_separately(self):
        summary = self.build([1.0, 1.0], failed=1).summary()
        assert summary["samples"] == 2
        assert summary["failed"] == 1


class TestOutputs:
    def test_files_written(self, tmp_path):
        result = ProbeResult(
            samples=[
                ProbeSample(index=0, ok=True, latency=1.0),
                ProbeSample(index=1, ok=False, error="boom"),
                ProbeSample(index=2, ok=True, latency=2.0),
            ]
        )
        write_probe_outputs(result, tmp_path)
        with open(tmp_path / "probe_samples.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3
        assert rows[1]["ok"] == "0"
        assert rows[1]["error"] == "boom"
        summary = json.loads((tmp_path / "probe_summary.json").read_text())
        assert summary["samples"] == 2
        assert summary["failed"] == 1
