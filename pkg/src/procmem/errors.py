"""Exception hierarchy shared across the package.

Every contract violation raises a named subclass of ProcmemError so that
callers (CLI, service) can map failures to exit codes / HTTP statuses
without string matching.
"""

from __future__ import annotations


class ProcmemError(Exception):
    """Base class for all package errors."""


# -- state schema -----------------------------------------------------------

class SchemaError(ProcmemError):
    """Raw state payload violates the procedural-state schema."""


class MissingKey(SchemaError):
    def __init__(self, key: str):
        super().__init__(f"missing required key: {key!r}")
        self.key = key


class ExtraKey(SchemaError):
    def __init__(self, key: str):
        super().__init__(f"unexpected key: {key!r}")
        self.key = key


class InvalidEnumValue(SchemaError):
    def __init__(self, field: str, value):
        super().__init__(f"invalid value for {field!r}: {value!r}")
        self.field = field
        self.value = value


class NonMonotonicStep(ProcmemError):
    """History step_index did not strictly increase."""


# -- embedding --------------------------------------------------------------

class EmbedError(ProcmemError):
    """Base class for embedding acquisition failures."""


class EndpointUnavailable(EmbedError):
    """Remote endpoint unreachable after the configured retries."""


class MalformedResponse(EmbedError):
    """Remote endpoint replied with an unexpected payload shape."""


class DimensionMismatch(EmbedError):
    """Vector dimensions disagree for the same model id."""


class ZeroVector(EmbedError):
    """Cosine similarity is undefined for a zero vector."""


class UnknownVocabularyString(EmbedError):
    """Input text is outside the one-hot fixture's closed vocabulary."""


# -- matching ---------------------------------------------------------------

class EmptyBank(ProcmemError):
    """Top-k selection over zero match results."""


class GoldNotFound(ProcmemError):
    """A gold task id is absent from its ranking."""


# -- adapter container ------------------------------------------------------

class ContainerError(ProcmemError):
    """Base class for adapter container codec failures."""


class IoError(ContainerError):
    pass


class InvariantViolation(ContainerError):
    """Adapter tensor data violates a structural invariant (e.g. NaN)."""


class CorruptHeader(ContainerError):
    pass


class OffsetOutOfBounds(ContainerError):
    pass


class UnsupportedDtype(ContainerError):
    pass


class PairingError(ContainerError):
    """down/up factors missing, mismatched, or rank-inconsistent."""


# -- bank -------------------------------------------------------------------

class BankError(ProcmemError):
    pass


class DuplicateTaskId(BankError):
    def __init__(self, task_id: str):
        super().__init__(f"task id already registered: {task_id!r}")
        self.task_id = task_id


class EmbedModelMismatch(BankError):
    """Embedder model id disagrees with the bank manifest."""


# -- fusion -----------------------------------------------------------------

class FuseError(ProcmemError):
    pass


class IncompatibleAdapters(FuseError):
    """Adapter sets are not factor-compatible (names/ranks/shapes)."""


class ShapeMismatch(FuseError):
    pass


class AlreadyApplied(FuseError):
    """A fused adapter is already staged on the host."""


class NothingApplied(FuseError):
    """Revert requested with no staged adapter."""


class UnknownLayer(FuseError):
    def __init__(self, name: str):
        super().__init__(f"fused adapter names a layer absent from host: {name!r}")
        self.name = name


# -- extraction -------------------------------------------------------------

class ExtractError(ProcmemError):
    pass


class ExtractionFailed(ExtractError):
    """All attempts exhausted under the fail fallback policy."""


# -- runtime / bench --------------------------------------------------------

class EmptyInput(ProcmemError):
    pass


class EmptyReport(ProcmemError):
    pass


class InsufficientStateGrid(ProcmemError):
    """Requested more distinct synthetic states than the enum grid holds."""


class EpisodeError(ProcmemError):
    """An episode aborted; carries the partial trace for diagnosis."""

    def __init__(self, message: str, steps=None):
        super().__init__(message)
        self.steps = list(steps) if steps is not None else []
