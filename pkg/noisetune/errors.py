"""
Exception hierarchy for noisetune.

Configuration problems (bad files, invalid parameters, broken graph topology) derive from
``ConfigError`` and map to CLI exit code 1; numerical failures inside the solvers derive from
``NumericError`` and map to exit code 2.
"""


class NoisetuneError(Exception):
    """Base class for every error raised on purpose by noisetune."""

    exit_code = 1


class ConfigError(NoisetuneError):
    """Invalid configuration, parameters or inputs."""

    exit_code = 1


class GraphError(ConfigError):
    """Factor-graph topology violation."""


class MissingVariableError(GraphError, KeyError):
    """A factor references a pose id that has no value."""

    def __init__(self, variable):
        self.variable = variable
        super().__init__(f"variable {variable!r} is not in the state assignment")

    def __str__(self):
        return self.args[0]


class DataError(ConfigError):
    """Malformed dataset, manifest or theta file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" ({path}" + (f":{line}" if line is not None else "") + ")"
        super().__init__(f"{message}{where}")


class NumericError(NoisetuneError):
    """A solver produced an unusable result."""

    exit_code = 2


class NonFiniteError(NumericError):
    """A residual, Jacobian or estimate became NaN/Inf."""


class RankError(NumericError):
    """The linearized system is singular; ``variable`` is the first zero-pivot variable."""

    def __init__(self, variable, pivot=None):
        self.variable = variable
        self.pivot = pivot
        detail = "" if pivot is None else f" (pivot {pivot:.3e})"
        super().__init__(f"singular system: zero pivot at variable {variable}{detail}")


class NonConvergenceError(NumericError):
    """Batch Gauss-Newton diverged; ``last_iterate`` holds the last accepted states."""

    def __init__(self, message, last_iterate=None):
        self.last_iterate = last_iterate
        super().__init__(message)


class TrajectoryError(NumericError):
    """A solver failure while processing training/test trajectory ``index``."""

    def __init__(self, index, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"trajectory {index}: {cause}")


class PerturbationError(NumericError):
    """A finite-difference solve failed for parameter ``parameter``."""

    def __init__(self, parameter, cause):
        self.parameter = parameter
        self.cause = cause
        super().__init__(f"perturbed solve for parameter {parameter} failed: {cause}")


def exit_code_for(exc: BaseException) -> int:
    """CLI exit code for ``exc``: 0 never, 1 for configuration, 2 for numeric failures."""
    if isinstance(exc, NoisetuneError):
        return exc.exit_code
    return 1


class TrainingError(NumericError):
    """Training aborted; ``trace`` holds the iterations completed before the failure."""

    def __init__(self, cause, trace=None, theta=None):
        self.cause = cause
        self.trace = trace
        self.theta = theta
        super().__init__(cause)

    def __str__(self):
        done = 0 if self.trace is None else len(self.trace)
        return f"training aborted after {done} iteration(s): {self.cause}"
