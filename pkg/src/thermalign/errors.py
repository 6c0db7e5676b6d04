"""Exception hierarchy shared across the package."""
from __future__ import annotations


class ThermalignError(Exception):
    """Base class for every error raised by this package."""


# scene generation
class InvalidScale(ThermalignError, ValueError):
    pass


class InvalidSpec(ThermalignError, ValueError):
    pass


class PlacementFailure(ThermalignError, RuntimeError):
    pass


class IoError(ThermalignError, OSError):
    pass


# dataset
class InvalidRotation(ThermalignError, ValueError):
    pass


class EmptyClass(ThermalignError, ValueError):
    pass


class EmptyDataset(ThermalignError, ValueError):
    pass


class SchemaError(ThermalignError, ValueError):
    """Malformed dataset or checkpoint file; ``locus`` names the offending record."""

    def __init__(self, message: str, locus: str | None = None):
        self.locus = locus
        super().__init__(f"{message} (at {locus})" if locus else message)


# model
class UnknownToken(ThermalignError, KeyError):
    def __str__(self) -> str:
        return f"unknown token: {self.args[0]!r}"


class ShapeError(ThermalignError, ValueError):
    pass


class EmptyTarget(ThermalignError, ValueError):
    pass


class PretrainDivergence(ThermalignError, RuntimeError):
    pass


# training
class InvalidStep(ThermalignError, ValueError):
    pass


class DivergenceError(ThermalignError, FloatingPointError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at step {step}")


class FreezeViolation(ThermalignError, RuntimeError):
    def __init__(self, tensors: list[str]):
        self.tensors = tensors
        super().__init__(f"frozen tensors changed: {', '.join(tensors)}")


class EmptyInput(ThermalignError, ValueError):
    pass


# evaluation
class EmptyEvaluation(ThermalignError, ValueError):
    pass


class MalformedHabitat(ThermalignError, ValueError):
    def __init__(self, line_count: int):
        self.line_count = line_count
        super().__init__(f"expected 4 content lines, got {line_count}")


class AbortedRun(ThermalignError, RuntimeError):
    pass


# backends
class BackendError(ThermalignError, RuntimeError):
    pass


class BackendTimeout(BackendError, TimeoutError):
    pass


class ProtocolError(BackendError):
    pass


class ConfigError(ThermalignError, ValueError):
    pass
