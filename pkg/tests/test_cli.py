import json

import pytest

from agentcache.cli import build_parser, main

from conftest import action_reply, evaluator_reply, reflection_reply


GRAPH = {
    "root_url": "https://cli.test",
    "default_latency": {"kind": "constant", "seconds": 0.001},
    "pages": [
        {
            "url": "https://cli.test",
            "text": "home",
            "buttons": [{"label": "Facts", "target_url": "https://cli.test/facts"}],
        },
        {"url": "https://cli.test/facts", "text": "the fact is 42"},
    ],
}


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "graph.json").write_text(json.dumps(GRAPH))
    (tmp_path / "tasks.jsonl").write_text(
        json.dumps({"id": "t1", "question": "what is the fact?", "root_url": "https://cli.test"})
        + "\n"
    )
    (tmp_path / "replies.json").write_text(
        json.dumps(
            {
                "replies": [
                    {"text": action_reply("Facts"), "latency": 0.01},
                    {"text": reflection_reply("fact is 42"), "latency": 0.01},
                    {"text": evaluator_reply("42"), "latency": 0.01},
                ]
            }
        )
    )
    (tmp_path / "config.json").write_text(
        json.dumps(
            {
                "task_file": str(tmp_path / "tasks.jsonl"),
                "runs_per_task": 1,
                "modes": ["off", "oracle"],
                "environment": {"type": "sim", "graph": str(tmp_path / "graph.json")},
                "models": {
                    "target": {"type": "scripted", "path": str(tmp_path / "replies.json")}
                },
                "time_scale": 1.0,
                "virtual_clock": True,
                "output_dir": str(tmp_path / "out"),
            }
        )
    )
    return tmp_path


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_run_flags(self):
        args = build_parser().parse_args(
            ["run", "--config", "c.json", "--modes", "off,oracle", "--seed", "3"]
        )
        assert args.command == "run"
        assert args.modes == "off,oracle"
        assert args.seed == 3


class TestCommands:
    def test_run_then_replay_then_report(self, workspace, capsys):
        code = main(["run", "--config", str(workspace / "config.json")])
        assert code == 0
        aggregates = json.loads(capsys.readouterr().out)
        assert set(aggregates) == {"off", "oracle"}

        trace = workspace / "out" / "traces" / "t1__off__run0.jsonl"
        assert main(["replay", str(trace)]) == 0
        replayed = json.loads(capsys.readouterr().out)
        assert replayed["answer"] == "42"

        code = main(
            [
                "report",
                str(workspace / "out" / "traces"),
                "--output-dir",
                str(workspace / "out2"),
            ]
        )
        assert code == 0
        assert (workspace / "out2" / "report.json").exists()

    def test_run_with_bad_config_exits_2(self, workspace, capsys):
        (workspace / "bad.json").write_text(json.dumps({"task_file": "missing.jsonl"}))
        assert main(["run", "--config", str(workspace / "bad.json")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_simulate_writes_csv(self, workspace, capsys):
        sweep = workspace / "sweep.json"
        sweep.write_text(
            json.dumps({"strategy": ["off", "uniform_random"], "steps": 100})
        )
        code = main(
            [
                "simulate",
                str(sweep),
                "--output-dir",
                str(workspace / "simout"),
            ]
        )
        assert code == 0
        assert (workspace / "simout" / "sweep.csv").exists()
