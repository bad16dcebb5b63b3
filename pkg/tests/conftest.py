import asyncio
import json
import random

import pytest

from agentcache.clock import VirtualClock, WallClock
from agentcache.environment import LatencySpec, build_synthetic_graph
from agentcache.model import TaskSpec
from agentcache.modelclient import ScriptedReply


def run(coro):
    return asyncio.run(coro)


def drive(clock, coro):
    return asyncio.run(clock.drive(coro))


# ---------------------------------------------------------------------------
# Scripted reply builders


def action_reply(button, thought="exploring"):
    payload = json.dumps({"button": button})
    return f"Thought: {thought}\nAction: visit_page\nAction Input: {payload}"


def final_answer_reply(answer):
    return f"Final Answer: {answer}"


def reflection_reply(information=None):
    if information is None:
        return json.dumps({"usefulness": False})
    return json.dumps({"usefulness": True, "information": information})


def evaluator_reply(answer=None):
    if answer is None:
        return json.dumps({"judge": False})
    return json.dumps({"judge": True, "answer": answer})


def draft_reply(buttons, thought="scouting ahead"):
    lines = [f"Thought: {thought}", "Action: visit_page"]
    for i, button in enumerate(buttons, start=1):
        lines.append(f"Action Input {i}: {json.dumps({'button': button})}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Episode fixtures: a scripted walk through a synthetic graph


def make_episode_fixture(
    seed=0,
    branching=5,
    depth=3,
    walk_length=3,
    action_latency=0.02,
    aux_latency=0.005,
    fetch_latency=0.002,
    end_with="evaluator",  # evaluator | final_answer | never
):
    """Deterministic (graph, task, target replies, draft replies, path)."""
    graph = build_synthetic_graph(
        branching=branching,
        depth=depth,
        seed=seed,
        base_url=f"https://sim{seed}.test",
        latency=LatencySpec(kind="constant", seconds=fetch_latency),
    )
    rng = random.Random(seed + 1)
    answer = f"answer-{seed}"
    question = f"question {seed}: where is the information?"
    task = TaskSpec(id=f"task{seed}", question=question, root_url=graph.root_url)

    target_replies = []
    draft_replies = []
    path_buttons = []
    url = graph.root_url
    for step in range(walk_length):
        page = graph.pages[url]
        index = rng.randrange(len(page.buttons))
        label, target_url = page.buttons[index]
        path_buttons.append(label)
        # Draft predicts the true button plus up to two decoys from this page.
        decoys = [b for b, _ in page.buttons if b != label][:2]
        draft_replies.append(
            ScriptedReply(text=draft_reply([label] + decoys), latency=aux_latency)
        )
        target_replies.append(
            ScriptedReply(text=action_reply(label, thought=f"step {step}: try {label}"),
                          latency=action_latency)
        )
        target_replies.append(
            ScriptedReply(text=reflection_reply(f"fact {seed}-{step}"), latency=aux_latency)
        )
        last = step == walk_length - 1
        if last and end_with == "evaluator":
            target_replies.append(
                ScriptedReply(text=evaluator_reply(answer), latency=aux_latency)
            )
        else:
            target_replies.append(
                ScriptedReply(text=evaluator_reply(None), latency=aux_latency)
            )
        url = target_url
    if end_with == "final_answer":
        target_replies.append(
            ScriptedReply(text=final_answer_reply(answer), latency=action_latency)
        )
        draft_replies.append(ScriptedReply(text="no more moves", latency=aux_latency))
    return {
        "graph": graph,
        "task": task,
        "question": question,
        "answer": answer,
        "target_replies": target_replies,
        "draft_replies": draft_replies,
        "path_buttons": path_buttons,
    }


@pytest.fixture
def wall_clock():
    return WallClock()


@pytest.fixture
def virtual_clock():
    return VirtualClock()
