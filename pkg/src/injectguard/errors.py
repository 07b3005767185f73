"""Exception types shared across the package."""


class InjectGuardError(Exception):
    """Base class for all package errors."""


class InvalidDictionaryError(InjectGuardError, ValueError):
    """Energy dictionary is empty, non-positive, or not strictly increasing."""


class DimensionError(InjectGuardError, ValueError):
    """Vector or tensor shapes do not line up."""


class InvalidInputError(InjectGuardError, ValueError):
    """An operation received an empty or out-of-contract input."""


class InvalidSpecError(InjectGuardError, ValueError):
    """Model layout cannot be realized (e.g. pooling below 1x1)."""


class CorruptDatasetError(InjectGuardError):
    """Dataset file failed magic, structure, or checksum validation."""


class CorruptWeightsError(InjectGuardError):
    """Weight blob failed magic, shape, or truncation validation."""


class ProtocolError(InjectGuardError):
    """Wire message violates the framing contract (magic, type, CRC)."""


class TransportError(InjectGuardError):
    """Connection-level failure: timeout, dead peer, short read."""


class AggregationError(InjectGuardError, ValueError):
    """Federated averaging inputs are inconsistent."""


class ConfigError(InjectGuardError, ValueError):
    """Experiment configuration text is malformed or out of range."""
