"""Exception hierarchy shared by every stage of the compression pipeline."""
from __future__ import annotations


class EIBertError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(EIBertError, ValueError):
    pass


class InvalidLabelError(EIBertError, ValueError):
    pass


class StaleTapeError(EIBertError, RuntimeError):
    pass


class SpecError(EIBertError, ValueError):
    pass


class VocabError(EIBertError, ValueError):
    pass


class IntegrationError(EIBertError, ValueError):
    pass


class AlignmentError(EIBertError, ValueError):
    pass


class CorpusError(EIBertError, ValueError):
    pass


class SurgeryError(EIBertError, ValueError):
    pass


class StepError(EIBertError, ValueError):
    pass


class TaskError(EIBertError, ValueError):
    pass


class ConfigError(EIBertError, ValueError):
    pass


class DependencyError(EIBertError, RuntimeError):
    pass


class TrainingError(EIBertError, RuntimeError):
    """Raised when a loss turns non-finite.

    ``state`` holds the last finite parameter snapshot (a state dict) and
    ``history`` whatever was recorded before the failure.
    """

    def __init__(self, message: str, state=None, history=None):
        super().__init__(message)
        self.state = state
        self.history = history


class OverflowContractError(EIBertError, RuntimeError):
    pass


class FormatError(EIBertError, ValueError):
    """Malformed checkpoint; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(FormatError):
    """A checkpoint tensor is missing or truncated; ``tensor`` names it."""

    def __init__(self, message: str, tensor: str, offset: int | None = None):
        super().__init__(f"{message}: tensor {tensor!r}", offset)
        self.tensor = tensor
