"""
Exception hierarchy for the back-transcription toolkit.

Every error is still a ValueError so callers that only care about bad input can keep
catching ValueError; the CLI uses ``to_dict`` to print a machine-readable summary.
"""

from typing import Any


class BtRobustnessError(ValueError):
    """Base class for all toolkit errors."""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        """Machine-readable error summary."""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


class ConfigError(BtRobustnessError):
    """Invalid run configuration."""


class CorpusError(BtRobustnessError):
    """Corpus content violates the sample schema or invariants."""


class SchemaError(CorpusError):
    """A record does not match the expected JSON schema."""


class DuplicateSampleError(CorpusError):
    """Two samples share an id."""

    def __init__(self, sample_id: str, line: int | None = None):
        super().__init__(f"Duplicate sample id: {sample_id}", sample_id=sample_id, line=line)
        self.sample_id = sample_id


class OutcomeKindError(CorpusError):
    """Outcomes of different tasks were compared."""


class MassiveFormatError(CorpusError):
    """A MASSIVE record is missing fields or has malformed slot markup."""


class IncompleteSampleError(CorpusError):
    """A sample lacks fields required by the requested operation."""


class AdapterError(BtRobustnessError):
    """An external TTS/ASR/NLU adapter failed."""


class UndefinedMetricError(BtRobustnessError):
    """A robustness metric has an empty domain."""


class EditOpError(BtRobustnessError):
    """Base class for edit operation errors."""


class EditOpFormatError(EditOpError):
    """A serialized edit operation cannot be parsed."""


class EditOpApplyError(EditOpError):
    """An edit operation does not fit the hypothesis it is applied to."""


class WerInputError(BtRobustnessError):
    """Word error rate inputs are inconsistent."""


class TrainingError(BtRobustnessError):
    """Error model training failed."""


class SingleClassError(TrainingError):
    """The training data contains only one class."""


class ConvergenceError(TrainingError):
    """The solver did not reach the requested tolerance."""


class AuditError(BtRobustnessError):
    """Invalid TTS audit input."""


class MissingVerdictError(AuditError):
    """Some rows of a filled annotation sheet have no verdict."""
