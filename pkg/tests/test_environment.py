import asyncio
import math
import random
import statistics
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from agentcache.clock import VirtualClock, WallClock
from agentcache.environment import (
    DEFAULT_LATENCY,
    LatencySpec,
    SimEnvironment,
    WebEnvironment,
    build_graph,
    build_synthetic_graph,
    extract_buttons,
    extract_links,
    extract_text,
    truncate_utf8,
)
from agentcache.errors import DanglingEdgeError, FetchError, UnknownButtonError
from agentcache.model import Action

from conftest import drive, run


SAMPLE_HTML = """
<html><head><title>Conference</title>
<style>.nav { color: red }</style>
<script>var x = "Hidden Button";</script>
</head><body>
<nav><a href="/">Home</a><a href="/program">Program</a></nav>
<h1>Welcome to the Conference</h1>
<p>The <b>submission deadline</b> is 21 March 2025.</p>
<a href="/calls/industry">Call for Industry Track</a>
<button>Register Now</button>
<a href="/program">Program</a>
<a href="mailto:chairs@conf.org">Email the chairs</a>
</body></html>
"""


class TestExtraction:
    def test_buttons_document_order_deduped(self):
        assert extract_buttons(SAMPLE_HTML) == [
            "Home",
            "Program",
            "Call for Industry Track",
            "Register Now",
            "Email the chairs",
        ]

    def test_buttons_skip_script_content(self):
        assert "Hidden Button" not in extract_buttons(SAMPLE_HTML)

    def test_many_anchors(self):
        html = "".join(f'<a href="/p{i}">Link {i}</a>' for i in range(81))
        assert len(extract_buttons(html)) == 81

    def test_text_collapses_whitespace_and_drops_style(self):
        text = extract_text(SAMPLE_HTML)
        assert "submission deadline is 21 March 2025" in text
        assert "color: red" not in text
        assert "Hidden Button" not in text
        assert "  " not in text

    def test_text_budget_respects_utf8_boundary(self):
        text = "café" * 100
        out = truncate_utf8(text, 9)  # 9 bytes cuts mid "é" (2 bytes)
        assert out == "cafécaf"
        assert len(out.encode()) <= 9

    def test_links_resolve_relative_hrefs(self):
        links = extract_links(SAMPLE_HTML, "https://conf.org/about")
        assert links["program"] == "https://conf.org/program"
        assert links["call for industry track"] == "https://conf.org/calls/industry"
        assert "email the chairs" not in links  # mailto dropped

    def test_malformed_html_does_not_crash(self):
        assert extract_buttons("<a href='/x'>ok<div></a>") is not None
        assert isinstance(extract_text("<<<>>><b"), str)

    def test_bytes_input(self):
        assert extract_buttons(b"<a href='/x'>Bin</a>") == ["Bin"]


class TestLatencySpec:
    def test_constant(self):
        spec = LatencySpec(kind="constant", seconds=0.2)
        assert spec.sample(random.Random(0)) == 0.2

    def test_lognormal_median_converges(self):
        # Monte Carlo oracle: sample median of lognormal(median=6, sigma=0.5)
        # must approach 6; at time_scale 0.01 this is the 0.06 s band.
        spec = LatencySpec(kind="lognormal", median=6.0, sigma=0.5)
        rng = random.Random(7)
        samples = sorted(spec.sample(rng) * 0.01 for _ in range(10_000))
        med = statistics.median(samples)
        assert 0.057 <= med <= 0.063

    def test_lognormal_analytic_mean(self):
        # Independent analytic check: mean = median * exp(sigma^2 / 2).
        spec = LatencySpec(kind="lognormal", median=6.0, sigma=0.5)
        rng = random.Random(11)
        mean = statistics.fmean(spec.sample(rng) for _ in range(50_000))
        expected = 6.0 * math.exp(0.5**2 / 2)
        assert abs(mean - expected) / expected < 0.05

    def test_empirical_draws_from_samples(self):
        spec = LatencySpec(kind="empirical", samples=(1.0, 2.0))
        rng = random.Random(0)
        assert {spec.sample(rng) for _ in range(50)} == {1.0, 2.0}

    def test_default_median_six_seconds(self):
        assert DEFAULT_LATENCY.kind == "lognormal"
        assert DEFAULT_LATENCY.median == 6.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "warp"},
            {"kind": "constant", "seconds": -1},
            {"kind": "lognormal", "median": 0},
            {"kind": "empirical", "samples": ()},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            LatencySpec(**kwargs)

    def test_round_trip(self):
        for spec in (
            LatencySpec(kind="constant", seconds=1.0),
            LatencySpec(kind="lognormal", median=6.0, sigma=0.75),
            LatencySpec(kind="empirical", samples=(1.0, 2.0)),
        ):
            assert LatencySpec.from_dict(spec.to_dict()) == spec


class TestGraph:
    def test_build_graph_from_dict(self):
        graph = build_graph(
            {
                "root_url": "https://a.org",
                "pages": [
                    {
                        "url": "https://a.org/",
                        "buttons": [{"label": "About", "target_url": "https://a.org/about"}],
                    },
                    {"url": "https://A.org/about/", "text": "about text"},
                ],
            }
        )
        assert graph.root_url == "https://a.org/"
        assert graph.pages["https://a.org/about"].text == "about text"

    def test_dangling_edge_rejected(self):
        with pytest.raises(DanglingEdgeError):
            build_graph(
                {
                    "pages": [
                        {
                            "url": "https://a.org",
                            "buttons": [{"label": "X", "target_url": "https://a.org/gone"}],
                        }
                    ]
                }
            )

    def test_build_graph_from_file(self, tmp_path):
        import json

        path = tmp_path / "graph.json"
        path.write_text(json.dumps({"pages": [{"url": "https://a.org"}]}))
        assert build_graph(path).root_url == "https://a.org/"

    def test_synthetic_uniform_branching(self):
        graph = build_synthetic_graph(branching=81, depth=1, seed=5)
        root = graph.pages[graph.root_url]
        assert len(root.buttons) == 81
        assert len(graph.pages) == 82
        for _, target in root.buttons:
            assert len(graph.pages[target].buttons) == 0

    def test_synthetic_deterministic(self):
        a = build_synthetic_graph(branching=4, depth=2, seed=9)
        b = build_synthetic_graph(branching=4, depth=2, seed=9)
        assert a.to_dict() == b.to_dict()
        c = build_synthetic_graph(branching=4, depth=2, seed=10)
        assert a.to_dict() != c.to_dict()

    def test_graph_dict_round_trip(self):
        graph = build_synthetic_graph(branching=3, depth=2, seed=1)
        rebuilt = build_graph(graph.to_dict())
        assert rebuilt.to_dict() == graph.to_dict()


class TestSimEnvironment:
    def make_env(self, **kwargs):
        graph = build_synthetic_graph(
            branching=4,
            depth=2,
            seed=3,
            latency=LatencySpec(kind="constant", seconds=0.5),
        )
        clock = VirtualClock()
        return SimEnvironment(graph, clock=clock, **kwargs), graph, clock

    def test_fetch_url_returns_page_observation(self):
        env, graph, clock = self.make_env()
        obs = drive(clock, env.fetch_url(graph.root_url))
        root = graph.pages[graph.root_url]
        assert obs.resolved_url == graph.root_url
        assert obs.buttons == tuple(label for label, _ in root.buttons)
        assert root.text.startswith(obs.content[:20])

    def test_fetch_follows_button(self):
        env, graph, clock = self.make_env()
        label, target = graph.pages[graph.root_url].buttons[1]
        obs = drive(
            clock, env.fetch(Action("visit_page", f"  {label.upper()} ", graph.root_url))
        )
        assert obs.resolved_url == target

    def test_unknown_button(self):
        env, graph, clock = self.make_env()
        with pytest.raises(UnknownButtonError):
            drive(clock, env.fetch(Action("visit_page", "nope", graph.root_url)))

    def test_unknown_url(self):
        env, graph, clock = self.make_env()
        with pytest.raises(FetchError):
            drive(clock, env.fetch_url("https://sim.test/absent"))

    def test_latency_scaled_and_recorded(self):
        env, graph, clock = self.make_env(time_scale=0.01)
        obs = drive(clock, env.fetch_url(graph.root_url))
        assert obs.fetch_latency == pytest.approx(0.5 * 0.01)
        assert clock.now() == pytest.approx(0.5 * 0.01)

    def test_fetch_count(self):
        env, graph, clock = self.make_env()

        async def main():
            await env.fetch_url(graph.root_url)
            await env.fetch_url(graph.root_url)

        drive(clock, main())
        assert env.fetch_count == 2

    def test_latency_independent_of_concurrency(self):
        # Same URLs fetched sequentially vs concurrently draw the same
        # latencies, because each URL has its own seeded stream.
        graph = build_synthetic_graph(
            branching=3, depth=1, seed=8, latency=LatencySpec(kind="lognormal", median=6.0, sigma=0.75)
        )
        urls = [t for _, t in graph.pages[graph.root_url].buttons]

        def latencies(concurrent):
            clock = VirtualClock()
            env = SimEnvironment(graph, clock=clock)

            async def main():
                if concurrent:
                    return await asyncio.gather(*(env.fetch_url(u) for u in urls))
                return [await env.fetch_url(u) for u in urls]

            return [o.fetch_latency for o in drive(clock, main())]

        assert latencies(False) == pytest.approx(latencies(True))

    def test_repeat_fetches_advance_latency_stream(self):
        graph = build_synthetic_graph(
            branching=1, depth=1, seed=8, latency=LatencySpec(kind="lognormal", median=6.0, sigma=0.75)
        )
        clock = VirtualClock()
        env = SimEnvironment(graph, clock=clock)

        async def main():
            a = await env.fetch_url(graph.root_url)
            b = await env.fetch_url(graph.root_url)
            return a, b

        a, b = drive(clock, main())
        assert a.fetch_latency != b.fetch_latency

    def test_content_budget_applied(self):
        graph = build_synthetic_graph(branching=1, depth=1, seed=0)
        clock = VirtualClock()
        env = SimEnvironment(graph, clock=clock, content_budget=10)
        obs = drive(clock, env.fetch_url(graph.root_url))
        assert len(obs.content.encode()) <= 10


PAGES = {
    "/": """<html><body>Root page here.
        <a href="/about">About</a><a href="/news/">News</a></body></html>""",
    "/about": "<html><body>We organize conferences.</body></html>",
    "/news/": '<html><body>News! <a href="/about">About</a></body></html>',
}


class _Handler(BaseHTTPRequestHandler):
    def do_GET(self):
        body = PAGES.get(self.path)
        if body is None:
            self.send_response(404)
            self.end_headers()
            return
        payload = body.encode()
        self.send_response(200)
        self.send_header("Content-Type", "text/html")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def stub_site():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestWebEnvironment:
    def test_fetch_and_follow_button(self, stub_site):
        async def main():
            env = WebEnvironment(per_host_delay=0.0)
            try:
                root = await env.fetch_url(stub_site)
                assert "Root page here." in root.content
                assert root.buttons == ("About", "News")
                about = await env.fetch(
                    Action("visit_page", "about", root.resolved_url)
                )
                assert "organize conferences" in about.content
                assert about.fetch_latency > 0
            finally:
                await env.close()

        run(main())

    def test_http_error_raises_fetch_error(self, stub_site):
        async def main():
            env = WebEnvironment(per_host_delay=0.0)
            try:
                with pytest.raises(FetchError):
                    await env.fetch_url(f"{stub_site}/missing")
            finally:
                await env.close()

        run(main())

    def test_fetch_without_snapshot_rejected(self, stub_site):
        async def main():
            env = WebEnvironment(per_host_delay=0.0)
            try:
                with pytest.raises(FetchError):
                    await env.fetch(Action("visit_page", "About", f"{stub_site}/about"))
            finally:
                await env.close()

        run(main())

    def test_per_host_delay_enforced(self, stub_site):
        async def main():
            clock = WallClock()
            env = WebEnvironment(clock=clock, per_host_delay=0.2)
            try:
                start = clock.now()
                await env.fetch_url(stub_site)
                await env.fetch_url(f"{stub_site}/about")
                return clock.now() - start
            finally:
                await env.close()

        assert run(main()) >= 0.2
