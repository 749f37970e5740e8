"""Exception hierarchy shared by every module.

The CLI maps each class onto its own exit code, so new error kinds should
subclass the closest existing class rather than ``PodracerError`` directly.
"""


class PodracerError(Exception):
    """Base class for all library errors."""


class ConfigError(PodracerError, ValueError):
    """A configuration value violates its invariants."""


class DataError(PodracerError, ValueError):
    """Market data is missing, malformed, or inconsistent."""


class LayoutError(PodracerError, ValueError):
    """Parameter layout does not match the consumer (env, snapshot, peer pod)."""


class EnvError(PodracerError, ValueError):
    """Illegal environment call (bad action shape, step after done, ...)."""


class DivergenceError(PodracerError, FloatingPointError):
    """A learner produced a non-finite loss or parameter."""


class PodFailure(PodracerError, RuntimeError):
    """A pod aborted; carries the agent id and pod index for diagnostics."""

    def __init__(self, agent_id: int, pod_index: int, cause: BaseException):
        super().__init__(f"agent {agent_id} pod {pod_index} failed: {cause!r}")
        self.agent_id = agent_id
        self.pod_index = pod_index
        self.cause = cause


class AgentFailure(PodracerError, RuntimeError):
    """An agent aborted during a generation."""

    def __init__(self, agent_id: int, generation: int, cause: BaseException):
        super().__init__(f"agent {agent_id} failed in generation {generation}: {cause}")
        self.agent_id = agent_id
        self.generation = generation
        self.cause = cause


class DegenerateVolatility(PodracerError, ArithmeticError):
    """Return series has zero dispersion, so a Sharpe ratio is undefined."""
