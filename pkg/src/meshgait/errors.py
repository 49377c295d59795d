class MeshGaitError(Exception):
    pass


class ConfigError(MeshGaitError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(MeshGaitError, ValueError):
    """Tensor shape does not match the expected layout."""


class ContractError(MeshGaitError, ValueError):
    """Input violates an operation's precondition (e.g. un-normalized heatmap)."""


class DataError(MeshGaitError):
    pass


class LoadError(DataError, OSError):
    """Missing or unreadable frames / files."""


class FormatError(DataError, ValueError):
    """Malformed sidecar or container file."""


class SamplingError(DataError, ValueError):
    """Batch sampling impossible with the given dataset."""
