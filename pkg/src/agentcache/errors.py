"""Exception hierarchy shared across the runtime."""


class AgentCacheError(Exception):
    """Base class for all runtime errors."""


class MalformedURLError(AgentCacheError):
    """URL is relative, non-http(s), or unparseable."""


class ConfigError(AgentCacheError):
    """A configuration value failed validation; names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FetchError(AgentCacheError):
    """Environment fetch failure; carries the attempted URL."""

    def __init__(self, url: str, message: str):
        super().__init__(f"{message} (url={url})")
        self.url = url


class UnknownButtonError(FetchError):
    """Sim environment: the requested button has no edge on the page."""


class DanglingEdgeError(AgentCacheError):
    """Graph spec references a page that does not exist."""

    def __init__(self, page_url: str, target_url: str):
        super().__init__(f"edge from {page_url} targets missing page {target_url}")
        self.page_url = page_url
        self.target_url = target_url


class TransportError(AgentCacheError):
    """Model endpoint unreachable or persistently failing after retries."""


class AuthenticationError(TransportError):
    """Model endpoint rejected the configured credential."""


class ResponseSchemaError(AgentCacheError):
    """Model endpoint returned a body that does not match the chat schema."""


class UnresolvedPlaceholderError(AgentCacheError):
    """Prompt template rendering hit an unbound placeholder."""

    def __init__(self, placeholder: str):
        super().__init__(f"unresolved placeholder: {placeholder}")
        self.placeholder = placeholder


class UnparseableReplyError(AgentCacheError):
    """Target model reply contains neither a final answer nor a valid action."""


class JsonNotFoundError(AgentCacheError):
    """No balanced JSON object could be extracted from the model reply."""


class ReplySchemaError(AgentCacheError):
    """Extracted JSON object violates the reflection/evaluator schema."""


class DegenerateInputError(AgentCacheError):
    """Statistic undefined for the given input (too few samples, zero mean)."""


class TranscriptDivergenceError(AgentCacheError):
    """Replay produced a trajectory that differs from the recorded one."""

    def __init__(self, step_index: int, field: str, expected, actual):
        super().__init__(
            f"replay diverged at step {step_index}, field {field!r}: "
            f"expected {expected!r}, got {actual!r}"
        )
        self.step_index = step_index
        self.field = field
