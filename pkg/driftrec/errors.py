"""
DRIFTREC ERRORS
Exception hierarchy shared by every layer of the streaming recommender
"""

from typing import Any, Optional


class DriftRecError(Exception):
    """Base class for all driftrec failures"""


class ConfigurationError(DriftRecError, ValueError):
    """Width, shape or hyperparameter mismatch detected while wiring networks"""


class ConfigError(DriftRecError, ValueError):
    """Run-configuration file problem (unknown key, bad value, violated invariant)"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


class GradCheckError(DriftRecError):
    """Finite-difference evaluation produced a non-finite function value"""

    def __init__(self, message: str, parameter: str):
        super().__init__(f"{message} [parameter: {parameter}]")
        self.parameter = parameter


class UnknownEntityError(DriftRecError, KeyError):
    """Entity id was never registered"""

    def __init__(self, kind: str, entity_id: Any):
        super().__init__(f"unregistered {kind} '{entity_id}'")
        self.kind = kind
        self.entity_id = entity_id

    def __str__(self) -> str:
        return self.args[0]


class ColdEntityError(UnknownEntityError):
    """Prediction requested for an entity with no history; callers fall back to the global mean"""


class DuplicateEntityError(DriftRecError):
    """Entity id registered twice"""


class CausalityError(DriftRecError):
    """Time moved backwards: out-of-order batch, clock regression or overlapping intervals"""


class NonFiniteError(DriftRecError, FloatingPointError):
    """Objective became NaN/Inf; carries the first offending rating event"""

    def __init__(self, message: str, event: Any = None):
        super().__init__(f"{message}: {event!r}" if event is not None else message)
        self.event = event


class DataFormatError(DriftRecError, ValueError):
    """Rating log is malformed, unsorted or empty where data is required"""


class RecordingDisabledError(DriftRecError):
    """Factor export requested from a checkpoint that recorded no snapshots"""
