"""
Custom exceptions for the adversarial Koopman toolkit
"""


class KoopmanError(Exception):
    """Base exception for all toolkit operations"""

    pass


class ValidationError(KoopmanError):
    """Input validation failed"""

    pass


class ConfigError(ValidationError):
    """Configuration file unreadable or inconsistent"""

    pass


class MissingPredecessorError(ValidationError):
    """A masked snapshot has no earlier available snapshot to predict from"""

    pass


class SolverBlowupError(KoopmanError):
    """Numerical solver left its admissible range"""

    pass


class CorpusError(KoopmanError):
    """Snapshot corpus operation failed"""

    pass


class CorruptCorpusError(CorpusError):
    """Corpus files are truncated or inconsistent with their metadata"""

    pass


class FormatVersionError(CorpusError):
    """Corpus written with an unsupported format version"""

    pass


class CorpusTooShortError(CorpusError):
    """Corpus holds fewer snapshots than a training window needs"""

    pass


class CheckpointError(KoopmanError):
    """Checkpoint unreadable or incompatible"""

    pass


class DivergenceError(KoopmanError):
    """Latent rollout exceeded its norm bound"""

    pass


class NonFiniteLossError(KoopmanError):
    """Loss evaluated to NaN or Inf"""

    pass


class NothingToPlotError(KoopmanError):
    """No plottable artifacts were found"""

    pass
