"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, TrainingError -> 4, IntegrityError -> 5.
"""


class SpeechAdaptError(Exception):
    """Base class for all package errors."""


class ContractError(SpeechAdaptError):
    """A caller violated a documented precondition (bad shape, bad axis, ...)."""


class ConfigError(SpeechAdaptError):
    """Invalid experiment configuration."""


class DataError(SpeechAdaptError):
    """Invalid or degenerate input data."""


class VocabularyError(DataError):
    """A token is not part of the domain's symbol inventory."""


class DegenerateInputError(DataError):
    """Zero-power waveform, zero-norm vector, or similar degenerate input."""


class InputTooShortError(DataError):
    """Input shorter than a kernel / receptive field."""


class InfeasibleTargetError(DataError):
    """No frame labeling can collapse to the requested target sequence."""


class TrainingError(SpeechAdaptError):
    """A training stage failed or was misconfigured at run time."""


class IntegrityError(SpeechAdaptError):
    """Checkpoint digest mismatch or corrupt on-disk state."""
