"""Chat-model abstraction for both the target and draft roles.

Includes the prompt templates for the four roles (action, self-reflection,
evaluator, draft prediction), reply parsers with a fixed strict-then-lenient
JSON ladder, a chat-completions wire client, and a deterministic scripted
client for tests and replay.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Optional, Union

from .clock import Clock, WallClock
from .errors import (
    AuthenticationError,
    JsonNotFoundError,
    ReplySchemaError,
    ResponseSchemaError,
    TransportError,
    UnparseableReplyError,
    UnresolvedPlaceholderError,
)
from .model import VISIT_PAGE, Action, EvaluatorVerdict, Reflection

# ---------------------------------------------------------------------------
# Prompt templates

TARGET_ACTION_TEMPLATE = """Digging through the buttons to find quality sources and the right information. You have access to the following tools:
{tool_description}
Use the following format:
Question: the input question you must answer
Thought: you should always think about what to do
Action: the action to take, should be one of [{tool_names}]
Action Input: the input to the action
Observation: the result of the action
Action: the action to take, should be one of [{tool_names}]
Action Input: the input to the action
Observation: the result of the action
... (this Thought/Action/Action Input/Observation can be repeated zero or more 20 times)
Notice:
- You must take action at every step. When you take action, you must use the tool with the correct format and output the action input.
- You can not say "I'm sorry, but I cannot assist with this request."!!! You must explore.
- When you have sufficient information to answer the query, provide your final answer in the format: "Final Answer: <your answer>"
- Action Input should be valid JSON.
- IF YOU DO NOT HAVE SUFFICIENT INFORMATION, CONTINUE EXPLORING BY TAKING ACTION.
- YOU MUST TAKE ACTION AT EVERY STEP UNLESS YOU ARE PRODUCING YOUR FINAL ANSWER. WHEN YOU TAKE ACTION, YOU MUST USE THE TOOL WITH THE CORRECT FORMAT AND OUTPUT THE ACTION INPUT. THEREFORE, YOU MUST OUTPUT AN ACTION AND AN ACTION INPUT.
- IF YOU ARE PRODUCING YOUR FINAL ANSWER, YOU MUST OUTPUT THE FINAL ANSWER IN THE FORMAT: "Final Answer: <your answer>"

Begin!
Question: {query}
Observation: {observation}"""

TARGET_REFLECTION_TEMPLATE = """You are an information extraction agent. Your task is to analyze the given observation and extract ANY information that could help answer the query, including:
- Direct facts and data
- Reasoning and conclusions made by the model
- Historical information that could be relevant
- Any insights that contribute to solving the query
- Background knowledge that supports the answer
**Input:**
- Query: "{query}"
- Observation: "{observation}"
**Output (JSON):**
{{
  "usefulness": true,
  "information": "<Extracted Useful Information> using string format"
}}
Or, if the observation contains NO potentially useful information at all:
{{
  "usefulness": false
}}
**Guidelines:**
- Be generous in what you consider "useful information"
- Include reasoning, conclusions, and background knowledge
- If the observation contains ANY information that could contribute to solving the query, mark it as useful
- Only mark as false if the observation is completely irrelevant
Only respond with valid JSON."""

TARGET_EVALUATOR_TEMPLATE = """You are a query answering agent. Your task is to evaluate whether the accumulated useful information is sufficient to answer the current query with HIGH CONFIDENCE. If it is sufficient and you are very confident in the answer, return a JSON object with a "judge" value of true and an "answer" field with the answer. If the information is insufficient or you have doubts, return a JSON object with a "judge" value of false.
**Input:**
- Query: "{query}"
- Accumulated Information: "{accumulated_information}"
**Output (JSON):**
{{
  "judge": true,
  "answer": "<Generated Answer> using string format"
}}
Or, if the information is insufficient or you have doubts:
{{
  "judge": false
}}
**Guidelines:**
- Only mark as sufficient if you are VERY CONFIDENT in the answer
- If you have any doubts about facts, reasoning, or completeness, mark as insufficient
- Consider whether you need more information to verify your answer
- The answer should be clear, complete, and directly address the query
- When in doubt, prefer to continue exploring rather than give a potentially wrong answer
Only respond with valid JSON."""

DRAFT_PREDICT_TEMPLATE = """Digging through the buttons to find quality sources and the right information. You have access to the following tools:
{tool_description}
Use the following format:
Question: the input question you must answer
Thought: you should always think about what to do
Action: the action to take, should be one of [{tool_names}]
Action Input 1: {{"button": "About"}}
Action Input 2: {{"button": "Contact"}}
Action Input 3: {{"button": "Application"}}
Observation: the result of the action
Action: the action to take, should be one of [{tool_names}]
Action Input 1: {{"button": "News"}}
Action Input 2: {{"button": "Info"}}
Action Input 3: {{"button": "Faculty"}}
Observation: the result of the action
... (this Thought/Action/Action Input/Observation can be repeated zero or more 20 times)
Notice:
- You must take action at every step. When you take action, you must use the tool with the correct format and output 3 action inputs.
- You must always output three Action Input lines (Action Input 1, Action Input 2, Action Input 3) for each Action, unless there are fewer than three distinct valid inputs available.
- If there are fewer than three, output as many as are available.
- When you can not find the information you need, you should visit page of previous page recursively until you find the information you need.
- You can not say "I'm sorry, but I cannot assist with this request."!!! You must explore.
- If you do not have sufficient information, continue exploring.
- Action Input should be a valid JSON.
- Do not recommend navigation buttons such as "About Wikipedia", "Search", "Create account", "Log in", "View source", "Print/export", "Navigation".
- Focus on content-specific buttons that are likely to contain information relevant to your query, such as:
  - Names of people, places, events, or topics
  - Years, dates, or time periods
  - Specific categories or sections
  - Links to related articles or detailed pages

Begin!
Question: {query}
Observation: {observation}"""

TEMPLATES = {
    "target_action": TARGET_ACTION_TEMPLATE,
    "target_reflection": TARGET_REFLECTION_TEMPLATE,
    "target_evaluator": TARGET_EVALUATOR_TEMPLATE,
    "draft_predict": DRAFT_PREDICT_TEMPLATE,
}

TOOL_DESCRIPTION = (
    'visit_page: visit a subpage of the current page by clicking the button '
    'with the given label. Action Input: {"button": "<button label>"}'
)
TOOL_NAMES = VISIT_PAGE


class _StrictDict(dict):
    def __missing__(self, key):
        raise UnresolvedPlaceholderError(key)


def render(template_id: str, **bindings: str) -> str:
    """Byte-deterministic template rendering; unbound placeholders raise."""
    try:
        body = TEMPLATES[template_id]
    except KeyError:
        raise KeyError(f"unknown template: {template_id!r}") from None
    try:
        return body.format_map(_StrictDict(bindings))
    except IndexError:
        raise UnresolvedPlaceholderError("<positional>") from None


# ---------------------------------------------------------------------------
# Requests / responses


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[dict, ...]
    model: str = ""
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: Optional[int] = None

    @classmethod
    def user(cls, prompt: str, **kwargs) -> "ChatRequest":
        return cls(messages=({"role": "user", "content": prompt},), **kwargs)

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.get("content", "") for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency: float
    prompt_tokens: int = 0
    completion_tokens: int = 0
    retries: int = 0

    def __post_init__(self):
        if self.latency < 0 or self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("latency and token counts must be >= 0")


class ChatClient:
    async def complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Wire client (chat-completions JSON over HTTP)


class OpenAIChatClient(ChatClient):
    """Minimal chat-completions client with retry and latency accounting.

    Transient transport failures and 5xx responses are retried up to
    `retries` times with exponential backoff; parse-level failures never are.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        api_key_env: Optional[str] = None,
        clock: Optional[Clock] = None,
        retries: int = 2,
        backoff: float = 0.5,
        timeout: float = 120.0,
        extra_fields: Optional[dict] = None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.clock = clock or WallClock()
        self.retries = retries
        self.backoff = backoff
        self.extra_fields = dict(extra_fields or {})
        key = api_key or (os.environ.get(api_key_env) if api_key_env else None)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.AsyncClient(timeout=timeout, headers=headers)

    async def complete(self, request: ChatRequest) -> ChatResponse:
        import httpx

        payload = {
            "model": request.model or self.model,
            "messages": list(request.messages),
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        payload.update(self.extra_fields)

        start = self.clock.now()
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                await self.clock.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                response = await self._client.post(
                    f"{self.base_url}/chat/completions", json=payload
                )
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code in (401, 403):
                raise AuthenticationError(f"HTTP {response.status_code} from endpoint")
            if response.status_code >= 500 or response.status_code == 429:
                last_error = TransportError(f"HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise TransportError(f"HTTP {response.status_code}")
            latency = self.clock.now() - start
            try:
                body = response.json()
                text = body["choices"][0]["message"]["content"]
                usage = body.get("usage", {})
                return ChatResponse(
                    text=text,
                    latency=latency,
                    prompt_tokens=usage.get("prompt_tokens", 0),
                    completion_tokens=usage.get("completion_tokens", 0),
                    retries=attempt,
                )
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ResponseSchemaError(f"malformed completion body: {exc}") from exc
        raise TransportError(f"exhausted {self.retries} retries: {last_error}")

    async def close(self) -> None:
        await self._client.aclose()


# ---------------------------------------------------------------------------
# Scripted client


@dataclass
class ScriptedReply:
    text: str
    latency: float = 0.0
    match: Optional[str] = None  # substring the rendered prompt must contain


class ScriptedModel(ChatClient):
    """Deterministic client replaying canned replies with synthetic latency.

    In sequential mode replies are consumed in order (match, if set, is
    asserted against the prompt). In matcher mode the first entry whose
    `match` substring occurs in the prompt is used, falling back to `default`.
    """

    def __init__(
        self,
        replies: list[ScriptedReply],
        clock: Optional[Clock] = None,
        sequential: bool = True,
        default: Optional[ScriptedReply] = None,
    ):
        self.replies = list(replies)
        self.clock = clock or WallClock()
        self.sequential = sequential
        self.default = default
        self.calls = 0
        self._cursor = 0

    def peek(self) -> Optional[ScriptedReply]:
        """Next unconsumed reply (sequential mode), or None when exhausted."""
        if self._cursor < len(self.replies):
            return self.replies[self._cursor]
        return self.default

    def _select(self, prompt: str) -> ScriptedReply:
        if self.sequential:
            if self._cursor < len(self.replies):
                reply = self.replies[self._cursor]
                self._cursor += 1
                if reply.match is not None and reply.match not in prompt:
                    raise ValueError(
                        f"scripted reply {self._cursor} expected prompt containing "
                        f"{reply.match!r}"
                    )
                return reply
            if self.default is not None:
                return self.default
            raise ValueError("scripted model exhausted")
        for reply in self.replies:
            if reply.match is not None and reply.match in prompt:
                return reply
        if self.default is not None:
            return self.default
        raise ValueError("no scripted reply matches the prompt")

    async def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        reply = self._select(request.prompt_text)
        start = self.clock.now()
        await self.clock.sleep(reply.latency)
        return ChatResponse(text=reply.text, latency=self.clock.now() - start)


# ---------------------------------------------------------------------------
# Reply parsing


@dataclass(frozen=True)
class ActionDecision:
    thought: str
    action: Action


@dataclass(frozen=True)
class FinalAnswer:
    answer: str


TargetReply = Union[ActionDecision, FinalAnswer]

_FINAL_ANSWER_RE = re.compile(r"^\s*Final Answer\s*:\s*(.*)$", re.MULTILINE | re.DOTALL)
_THOUGHT_RE = re.compile(r"^\s*Thought\s*:\s*(.*?)(?=^\s*(?:Action|Final Answer)\s*:|\Z)",
                         re.MULTILINE | re.DOTALL)
_ACTION_RE = re.compile(r"^\s*Action\s*:\s*([A-Za-z_][A-Za-z0-9_]*)", re.MULTILINE)
_ACTION_INPUT_RE = re.compile(r"^\s*Action Input\s*:\s*(.*)$", re.MULTILINE)
_DRAFT_INPUT_RE = re.compile(r"^\s*Action Input\s*\d+\s*:\s*(.*)$", re.MULTILINE)


def first_json_object(text: str) -> dict:
    """Strict parse, then the first balanced JSON object embedded in text."""
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj
    except (ValueError, TypeError):
        pass
    if not isinstance(text, str):
        raise JsonNotFoundError("input is not text")
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(text, i)
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    raise JsonNotFoundError("no JSON object found in reply")


def _decode_button(payload: str) -> Optional[str]:
    try:
        obj, _ = json.JSONDecoder().raw_decode(payload.strip())
    except (ValueError, TypeError):
        return None
    if isinstance(obj, dict) and isinstance(obj.get("button"), str):
        return obj["button"]
    return None


def parse_target_reply(text: str, origin_state: str) -> TargetReply:
    """Extract either the final answer or the last thought/action pair."""
    if not isinstance(text, str):
        raise UnparseableReplyError("reply is not text")
    final = _FINAL_ANSWER_RE.search(text)
    if final:
        return FinalAnswer(answer=final.group(1).strip())
    thoughts = _THOUGHT_RE.findall(text)
    actions = _ACTION_RE.findall(text)
    inputs = _ACTION_INPUT_RE.findall(text)
    if not actions or not inputs:
        raise UnparseableReplyError("reply has neither a final answer nor an action")
    name = actions[-1].strip()
    if name != VISIT_PAGE:
        raise UnparseableReplyError(f"unknown action name: {name!r}")
    button = _decode_button(inputs[-1])
    if button is None or not button.strip():
        raise UnparseableReplyError("action input is not a JSON object with a button")
    try:
        action = Action(kind=VISIT_PAGE, argument=button, origin_state=origin_state)
    except Exception as exc:
        raise UnparseableReplyError(str(exc)) from exc
    return ActionDecision(thought=thoughts[-1].strip() if thoughts else "", action=action)


def parse_draft_reply(text: str, limit: Optional[int] = None) -> list[str]:
    """Button arguments from numbered Action Input lines, in order.

    Unparseable lines are skipped; at most `limit` arguments are returned.
    """
    if not isinstance(text, str):
        return []
    buttons: list[str] = []
    for payload in _DRAFT_INPUT_RE.findall(text):
        button = _decode_button(payload)
        if button is not None and button.strip():
            buttons.append(button)
            if limit is not None and len(buttons) >= limit:
                break
    return buttons


def parse_reflection(text: str) -> Reflection:
    obj = first_json_object(text)
    usefulness = obj.get("usefulness")
    if not isinstance(usefulness, bool):
        raise ReplySchemaError('"usefulness" must be a boolean')
    if not usefulness:
        return Reflection(usefulness=False)
    information = obj.get("information")
    if information is not None and not isinstance(information, str):
        raise ReplySchemaError('"information" must be a string')
    return Reflection(usefulness=True, information=information)


def parse_evaluator(text: str) -> EvaluatorVerdict:
    obj = first_json_object(text)
    judge = obj.get("judge")
    if not isinstance(judge, bool):
        raise ReplySchemaError('"judge" must be a boolean')
    if not judge:
        return EvaluatorVerdict(judge=False)
    answer = obj.get("answer")
    if not isinstance(answer, str):
        raise ReplySchemaError('"judge": true requires a string "answer"')
    return EvaluatorVerdict(judge=True, answer=answer)
