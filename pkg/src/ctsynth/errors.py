"""Exception taxonomy.

Everything raised deliberately by this package derives from CtSynthError so
callers (and the CLI) can distinguish our rejections from genuine bugs.
"""


class CtSynthError(Exception):
    """Base class for all errors raised by ctsynth."""


class ManifestError(CtSynthError):
    """Malformed or inconsistent dataset manifest."""


class DomainError(CtSynthError):
    """Volume intensity-domain misuse (HU where UNIT expected, etc.)."""


class ShapeError(CtSynthError):
    """Grid shape violates a structural requirement."""


class ValidationError(CtSynthError):
    """A parameter value is outside its allowed range."""


class ConfigError(ValidationError):
    """Run configuration failed to parse or validate."""


class ContractError(CtSynthError):
    """An API was called in a state its contract forbids."""


class TrainingDivergedError(CtSynthError):
    """Loss became non-finite during training."""


class InsufficientSamplesError(CtSynthError):
    """Too few samples to compute the requested statistic."""
