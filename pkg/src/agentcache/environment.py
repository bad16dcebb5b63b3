"""Environment abstraction: live web fetching and a deterministic simulator.

Both implementations return the same Observation shape so the agent loop,
cache, and speculator are indifferent to which one is configured. The
simulator realizes latency by sleeping (scaled), so overlap behaviour under
test matches the wall-clock behaviour of the real system.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from html.parser import HTMLParser
from math import log
from typing import Optional
from urllib.parse import urljoin

from .clock import Clock, WallClock
from .errors import DanglingEdgeError, FetchError, UnknownButtonError
from .model import (
    DEFAULT_CONTENT_BUDGET,
    Action,
    Observation,
    canonicalize,
    normalize_label,
)

# ---------------------------------------------------------------------------
# Latency models


@dataclass(frozen=True)
class LatencySpec:
    """Per-page fetch latency distribution.

    kinds: constant (seconds), lognormal (median seconds + sigma),
    empirical (sample list, drawn uniformly).
    """

    kind: str
    seconds: float = 0.0
    median: float = 0.0
    sigma: float = 0.0
    samples: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "constant":
            if self.seconds < 0:
                raise ValueError("constant latency must be >= 0")
        elif self.kind == "lognormal":
            if self.median <= 0:
                raise ValueError("lognormal median must be > 0")
            if self.sigma < 0:
                raise ValueError("lognormal sigma must be >= 0")
        elif self.kind == "empirical":
            if not self.samples:
                raise ValueError("empirical latency needs at least one sample")
            if any(s < 0 for s in self.samples):
                raise ValueError("empirical samples must be >= 0")
        else:
            raise ValueError(f"unknown latency kind: {self.kind!r}")

    def sample(self, rng: random.Random) -> float:
        if self.kind == "constant":
            return self.seconds
        if self.kind == "lognormal":
            return rng.lognormvariate(log(self.median), self.sigma)
        return rng.choice(self.samples)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "seconds": self.seconds}
        if self.kind == "lognormal":
            return {"kind": "lognormal", "median": self.median, "sigma": self.sigma}
        return {"kind": "empirical", "samples": list(self.samples)}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencySpec":
        kind = d["kind"]
        if kind == "constant":
            return cls(kind="constant", seconds=d["seconds"])
        if kind == "lognormal":
            return cls(kind="lognormal", median=d["median"], sigma=d.get("sigma", 0.0))
        return cls(kind="empirical", samples=tuple(d["samples"]))


# Default calibration: median 6 s with a visible long tail; sigma is a free
# parameter, not recoverable from measurement summaries.
DEFAULT_LATENCY = LatencySpec(kind="lognormal", median=6.0, sigma=0.75)


# ---------------------------------------------------------------------------
# HTML extraction

_SKIP_ELEMENTS = {"script", "style", "noscript", "template"}
_CLICKABLE = {"a", "button"}


class _Extractor(HTMLParser):
    """Single pass collecting visible text and clickable labels/targets."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.text_parts: list[str] = []
        self.buttons: list[tuple[str, Optional[str]]] = []  # (label, href)
        self._skip_depth = 0
        self._clickable_stack: list[tuple[str, Optional[str], list[str]]] = []

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_ELEMENTS:
            self._skip_depth += 1
            return
        if tag in _CLICKABLE:
            href = dict(attrs).get("href")
            self._clickable_stack.append((tag, href, []))

    def handle_endtag(self, tag):
        if tag in _SKIP_ELEMENTS:
            self._skip_depth = max(0, self._skip_depth - 1)
            return
        if tag in _CLICKABLE and self._clickable_stack:
            _, href, parts = self._clickable_stack.pop()
            label = " ".join("".join(parts).split())
            if label:
                self.buttons.append((label, href))

    def handle_data(self, data):
        if self._skip_depth:
            return
        self.text_parts.append(data)
        for _, _, parts in self._clickable_stack:
            parts.append(data)


def _parse_html(html) -> _Extractor:
    if isinstance(html, bytes):
        html = html.decode("utf-8", errors="replace")
    extractor = _Extractor()
    try:
        extractor.feed(html)
        extractor.close()
    except Exception:
        pass  # best effort on malformed markup
    return extractor


def extract_buttons(html) -> list[str]:
    """Visible labels of anchors/buttons, document order, first occurrence wins.

    Navigation boilerplate is intentionally not filtered here; the prompts
    instruct the models to skip it.
    """
    seen = set()
    labels = []
    for label, _ in _parse_html(html).buttons:
        if label not in seen:
            seen.add(label)
            labels.append(label)
    return labels


def extract_links(html, base_url: str) -> dict[str, str]:
    """Normalized label -> absolute target URL for anchors with hrefs."""
    links: dict[str, str] = {}
    for label, href in _parse_html(html).buttons:
        if not href:
            continue
        norm = normalize_label(label)
        if norm not in links:
            try:
                links[norm] = canonicalize(urljoin(base_url, href))
            except Exception:
                continue  # javascript:, mailto:, fragments, etc.
    return links


def truncate_utf8(text: str, budget: int) -> str:
    """Longest prefix of text whose UTF-8 encoding is <= budget bytes."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    encoded = text.encode("utf-8")
    if len(encoded) <= budget:
        return text
    return encoded[:budget].decode("utf-8", errors="ignore")


def extract_text(html, budget: int = DEFAULT_CONTENT_BUDGET) -> str:
    """Visible text with scripts/styles removed and whitespace collapsed,
    truncated at a UTF-8 boundary within the byte budget."""
    text = " ".join("".join(_parse_html(html).text_parts).split())
    return truncate_utf8(text, budget)


# ---------------------------------------------------------------------------
# Simulated page graph


@dataclass(frozen=True)
class Page:
    url: str
    title: str
    text: str
    buttons: tuple[tuple[str, str], ...]  # (label, target canonical URL)
    latency: Optional[LatencySpec] = None


@dataclass(frozen=True)
class PageGraph:
    pages: dict[str, Page]
    root_url: str
    seed: int = 0
    default_latency: LatencySpec = DEFAULT_LATENCY

    def validate(self) -> "PageGraph":
        for page in self.pages.values():
            for _, target in page.buttons:
                if target not in self.pages:
                    raise DanglingEdgeError(page.url, target)
        return self

    def to_dict(self) -> dict:
        return {
            "root_url": self.root_url,
            "seed": self.seed,
            "default_latency": self.default_latency.to_dict(),
            "pages": [
                {
                    "url": p.url,
                    "title": p.title,
                    "text": p.text,
                    "buttons": [
                        {"label": label, "target_url": target}
                        for label, target in p.buttons
                    ],
                    **({"latency": p.latency.to_dict()} if p.latency else {}),
                }
                for p in self.pages.values()
            ],
        }


def build_graph(spec) -> PageGraph:
    """Build a PageGraph from a spec file path or an already-parsed dict."""
    if not isinstance(spec, dict):
        with open(spec, encoding="utf-8") as f:
            spec = json.load(f)
    pages: dict[str, Page] = {}
    for p in spec["pages"]:
        url = canonicalize(p["url"])
        buttons = tuple(
            (b["label"], canonicalize(b["target_url"])) for b in p.get("buttons", [])
        )
        latency = LatencySpec.from_dict(p["latency"]) if "latency" in p else None
        pages[url] = Page(
            url=url,
            title=p.get("title", url),
            text=p.get("text", ""),
            buttons=buttons,
            latency=latency,
        )
    default_latency = (
        LatencySpec.from_dict(spec["default_latency"])
        if "default_latency" in spec
        else DEFAULT_LATENCY
    )
    root = canonicalize(spec.get("root_url") or next(iter(pages)))
    return PageGraph(
        pages=pages, root_url=root, seed=spec.get("seed", 0), default_latency=default_latency
    ).validate()


_WORDS = (
    "archive program venue registration schedule committee awards workshop "
    "tutorial sponsors travel policy history contact press membership careers "
    "research library gallery events calendar deadline submission proceedings"
).split()


def build_synthetic_graph(
    branching: int = 81,
    depth: int = 2,
    seed: int = 0,
    base_url: str = "https://sim.test",
    latency: LatencySpec = LatencySpec(kind="constant", seconds=0.05),
) -> PageGraph:
    """Uniform-branching tree: every non-leaf page has exactly `branching`
    buttons. Fully determined by (branching, depth, seed, base_url)."""
    rng = random.Random(seed)
    pages: dict[str, Page] = {}
    index = 0

    def make_page(level: int) -> str:
        nonlocal index
        idx = index
        index += 1
        url = canonicalize(f"{base_url}/p{idx}")
        title = f"{rng.choice(_WORDS).title()} {idx}"
        text = f"{title}. " + " ".join(rng.choice(_WORDS) for _ in range(12))
        buttons = []
        if level < depth:
            for i in range(branching):
                target = make_page(level + 1)
                label = f"{rng.choice(_WORDS).title()} {idx}-{i}"
                buttons.append((label, target))
        pages[url] = Page(url=url, title=title, text=text, buttons=tuple(buttons))
        return url

    root = make_page(0)
    return PageGraph(
        pages=pages, root_url=root, seed=seed, default_latency=latency
    ).validate()


# ---------------------------------------------------------------------------
# Environment implementations


class Environment:
    async def fetch_url(self, url: str) -> Observation:
        raise NotImplementedError

    async def fetch(self, action: Action) -> Observation:
        raise NotImplementedError

    async def close(self) -> None:
        pass


class SimEnvironment(Environment):
    """Deterministic environment over a PageGraph.

    Latency is sampled from the page's spec with an RNG derived from
    (graph seed, URL), then actually slept (scaled by time_scale), so results
    are independent of concurrent interleaving.
    """

    def __init__(
        self,
        graph: PageGraph,
        clock: Optional[Clock] = None,
        time_scale: float = 0.01,
        content_budget: int = DEFAULT_CONTENT_BUDGET,
    ):
        self.graph = graph
        self.clock = clock or WallClock()
        self.time_scale = time_scale
        self.content_budget = content_budget
        self.fetch_count = 0
        self._rngs: dict[str, random.Random] = {}

    def _page(self, url: str) -> Page:
        url = canonicalize(url)
        page = self.graph.pages.get(url)
        if page is None:
            raise FetchError(url, "page not in graph")
        return page

    def sample_latency(self, url: str) -> float:
        """Unscaled latency draw for the next fetch of this URL."""
        rng = self._rngs.get(url)
        if rng is None:
            rng = random.Random(f"{self.graph.seed}|{url}")
            self._rngs[url] = rng
        spec = self._page(url).latency or self.graph.default_latency
        return spec.sample(rng)

    async def fetch_url(self, url: str) -> Observation:
        page = self._page(url)
        self.fetch_count += 1
        latency = self.sample_latency(page.url)
        start = self.clock.now()
        await self.clock.sleep(latency * self.time_scale)
        elapsed = self.clock.now() - start
        return Observation(
            content=truncate_utf8(page.text, self.content_budget),
            buttons=tuple(label for label, _ in page.buttons),
            resolved_url=page.url,
            fetch_latency=elapsed,
        )

    async def fetch(self, action: Action) -> Observation:
        page = self._page(action.origin_state)
        wanted = normalize_label(action.argument)
        for label, target in page.buttons:
            if normalize_label(label) == wanted:
                return await self.fetch_url(target)
        raise UnknownButtonError(
            page.url, f"no button matching {action.argument!r} on page"
        )


class WebEnvironment(Environment):
    """Live HTTP environment with per-host politeness.

    Buttons are resolved against the snapshot of the origin page taken when
    it was last fetched, mirroring what the models were shown.
    """

    def __init__(
        self,
        clock: Optional[Clock] = None,
        timeout: float = 30.0,
        user_agent: str = "agentcache/0.1",
        per_host_delay: float = 1.0,
        content_budget: int = DEFAULT_CONTENT_BUDGET,
    ):
        import asyncio

        import httpx

        self.clock = clock or WallClock()
        self.timeout = timeout
        self.per_host_delay = per_host_delay
        self.content_budget = content_budget
        self._client = httpx.AsyncClient(
            timeout=timeout,
            headers={"User-Agent": user_agent},
            follow_redirects=True,
        )
        self._snapshots: dict[str, dict[str, str]] = {}
        self._host_locks: dict[str, asyncio.Lock] = {}
        self._host_last: dict[str, float] = {}
        self._asyncio = asyncio

    def _host_lock(self, host: str):
        lock = self._host_locks.get(host)
        if lock is None:
            lock = self._asyncio.Lock()
            self._host_locks[host] = lock
        return lock

    async def fetch_url(self, url: str) -> Observation:
        import httpx
        from urllib.parse import urlsplit

        url = canonicalize(url)
        host = urlsplit(url).netloc
        async with self._host_lock(host):
            last = self._host_last.get(host)
            if last is not None:
                remaining = self.per_host_delay - (self.clock.now() - last)
                if remaining > 0:
                    await self.clock.sleep(remaining)
            start = self.clock.now()
            try:
                response = await self._client.get(url)
            except httpx.HTTPError as exc:
                raise FetchError(url, f"transport failure: {exc}") from exc
            finally:
                self._host_last[host] = self.clock.now()
            elapsed = self.clock.now() - start
        if response.status_code >= 400:
            raise FetchError(url, f"HTTP {response.status_code}")
        body = response.content
        resolved = canonicalize(str(response.url))
        self._snapshots[resolved] = extract_links(body, resolved)
        if resolved != url:
            self._snapshots[url] = self._snapshots[resolved]
        return Observation(
            content=extract_text(body, self.content_budget),
            buttons=tuple(extract_buttons(body)),
            resolved_url=resolved,
            fetch_latency=elapsed,
        )

    async def fetch(self, action: Action) -> Observation:
        snapshot = self._snapshots.get(action.origin_state)
        if snapshot is None:
            raise FetchError(
                action.origin_state, "origin page was never fetched in this session"
            )
        target = snapshot.get(normalize_label(action.argument))
        if target is None:
            raise UnknownButtonError(
                action.origin_state,
                f"no link matching {action.argument!r} on page snapshot",
            )
        return await self.fetch_url(target)

    async def close(self) -> None:
        await self._client.aclose()
