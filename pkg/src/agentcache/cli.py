"""Command-line entry point: run, replay, simulate, probe, report."""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

from . import harness, probe, simulate
from .clock import WallClock
from .errors import AgentCacheError


def _add_global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--seed", type=int, help="override RNG seed")
    parser.add_argument("--time-scale", type=float, help="sim latency scale factor")
    parser.add_argument(
        "--virtual-clock", action="store_true", default=None,
        help="run under the deterministic virtual clock",
    )
    parser.add_argument("--output-dir", help="directory for traces and reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentcache",
        description="Speculative action-observation caching runtime for web agents",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute benchmark tasks and write traces")
    _add_global_flags(run)
    run.add_argument("--task-file", help="override the config's task file")
    run.add_argument("--modes", help="comma-separated modes (off,draft_model,...)")
    run.add_argument("--runs-per-task", type=int)

    replay = sub.add_parser("replay", help="re-execute an episode from its trace")
    _add_global_flags(replay)
    replay.add_argument("trace", help="trace file to replay")
    replay.add_argument(
        "--policy", help="swap the speculation mode (e.g. oracle) for what-if hit rates"
    )

    sim = sub.add_parser("simulate", help="hit-rate/latency sweep over strategies")
    _add_global_flags(sim)
    sim.add_argument("sweep", help="sweep spec JSON file")
    sim.add_argument("--out", help="CSV output path (default <output-dir>/sweep.csv)")

    pr = sub.add_parser("probe", help="measure endpoint latency on a schedule")
    _add_global_flags(pr)
    pr.add_argument("--base-url", required=True)
    pr.add_argument("--model", default="")
    pr.add_argument("--api-key-env", default=None)
    pr.add_argument("--count", type=int, default=20)
    pr.add_argument(
        "--interval", type=float, default=probe.DEFAULT_INTERVAL_SECONDS,
        help="seconds between calls",
    )
    pr.add_argument("--max-tokens", type=int, default=512)

    rep = sub.add_parser("report", help="recompute the report from trace files")
    _add_global_flags(rep)
    rep.add_argument("traces", help="directory of trace files")

    return parser


def _load_config(args) -> harness.RunConfig:
    if args.config:
        config = harness.RunConfig.from_file(args.config)
    else:
        config = harness.RunConfig(task_file="")
    if args.seed is not None:
        config.seed = args.seed
    if args.time_scale is not None:
        config.time_scale = args.time_scale
    if args.virtual_clock is not None:
        config.virtual_clock = args.virtual_clock
    if args.output_dir is not None:
        config.output_dir = args.output_dir
    if getattr(args, "task_file", None):
        config.task_file = args.task_file
    if getattr(args, "modes", None):
        config.modes = args.modes.split(",")
    if getattr(args, "runs_per_task", None):
        config.runs_per_task = args.runs_per_task
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = harness.cmd_run(_load_config(args))
            print(json.dumps(report.aggregates, indent=2))
            return 0 if report.ok else 1

        if args.command == "replay":
            result = harness.cmd_replay(args.trace, policy_override=args.policy)
            print(
                json.dumps(
                    {
                        "answer": result.answer,
                        "termination": result.termination.value,
                        "cache_stats": result.cache_stats,
                    },
                    indent=2,
                )
            )
            return 0

        if args.command == "simulate":
            config = _load_config(args)
            results = simulate.run_sweep(args.sweep)
            out = args.out or str(Path(config.output_dir) / "sweep.csv")
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            simulate.write_sweep_csv(results, out)
            print(f"wrote {len(results)} cells to {out}")
            return 0

        if args.command == "probe":
            from .modelclient import OpenAIChatClient

            config = _load_config(args)
            client = OpenAIChatClient(
                base_url=args.base_url,
                model=args.model,
                api_key_env=args.api_key_env,
            )

            async def run():
                try:
                    return await probe.run_probe(
                        client,
                        count=args.count,
                        interval=args.interval,
                        max_tokens=args.max_tokens,
                        clock=WallClock(),
                    )
                finally:
                    await client.close()

            result = asyncio.run(run())
            probe.write_probe_outputs(result, config.output_dir)
            print(json.dumps(result.summary(), indent=2))
            return 0

        if args.command == "report":
            report = harness.build_report(args.traces)
            out_dir = args.output_dir or "out"
            harness.write_report(report, out_dir)
            print(json.dumps(report.aggregates, indent=2))
            return 0
    except AgentCacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
