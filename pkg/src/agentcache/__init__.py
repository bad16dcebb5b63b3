"""Speculative action-observation caching runtime for turn-based web agents."""

from .agent import AgentLoop, EpisodeResult, EpisodeState, Termination
from .cache import ActionObservationCache, CacheStats, Hit, InFlight, Miss
from .clock import Clock, VirtualClock, WallClock
from .environment import (
    LatencySpec,
    PageGraph,
    SimEnvironment,
    WebEnvironment,
    build_graph,
    build_synthetic_graph,
    extract_buttons,
    extract_text,
)
from .model import (
    Action,
    CacheKey,
    IterationMetrics,
    Observation,
    ObservationSource,
    TaskSpec,
    TrajectoryStep,
    cache_key_of,
    canonicalize,
)
from .modelclient import (
    ChatRequest,
    ChatResponse,
    OpenAIChatClient,
    ScriptedModel,
    ScriptedReply,
    parse_draft_reply,
    parse_evaluator,
    parse_reflection,
    parse_target_reply,
    render,
)
from .speculator import SpeculationPolicy, SpeculationRound, Speculator

__version__ = "0.1.0"
