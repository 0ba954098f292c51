"""Exception hierarchy shared by every open_sora_kit module."""


class KitError(Exception):
    """Base class for all errors raised by the kit."""


class DimensionError(KitError):
    """Tensor shapes do not line up for the requested operation."""


class GeometryError(KitError):
    """Video geometry (frames, height, width) violates a codec or bucket contract."""


class DomainError(KitError):
    """A scalar argument lies outside its admissible range."""


class NonFiniteError(KitError):
    """An operation produced NaN or Inf."""


class EvaluationError(KitError):
    """A function under evaluation returned a non-finite or non-scalar value."""


class DegenerateStatsError(KitError):
    """Channel statistics cannot be used for normalization (std <= 0)."""


class PreconditionError(KitError):
    """An operation was called with inputs it does not accept."""


class ArgumentError(KitError):
    """A user supplied argument (CLI flag, mask spec) is invalid."""


class ConfigError(KitError):
    """The run configuration file is malformed."""


class FormatError(KitError):
    """A serialized tensor or checkpoint could not be decoded."""


class TrainingDivergedError(KitError):
    """The training loss became non-finite."""
