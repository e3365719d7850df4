"""Exception types shared across the package."""


class CrnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CrnError):
    """Bad config file, config key, or flag value."""


class VocabularyError(CrnError):
    """Invalid vocabulary structure or lookup failure."""


class EmbeddingError(CrnError):
    """Embedding table problem: zero vector, missing token, bad file."""


class DataFormatError(CrnError):
    """Malformed dataset/detection/checkpoint file; carries location info."""


class DimensionError(CrnError):
    """Declared dimensions disagree with the data."""


class TrainingError(CrnError):
    """Numerical failure during training (non-finite gradient or parameter)."""
