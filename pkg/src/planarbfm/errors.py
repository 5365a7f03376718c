"""Exception hierarchy shared across the package."""


class PlanarBfmError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PlanarBfmError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(PlanarBfmError):
    """Invalid configuration value or unknown config key."""


class ContractError(PlanarBfmError):
    """An API precondition was violated (non-scalar loss, empty token set, ...)."""


class NonFiniteError(PlanarBfmError):
    """A NaN or Inf appeared where only finite values are allowed."""


class SimulationError(PlanarBfmError):
    """Physics step received or produced invalid state."""


class TrainingError(PlanarBfmError):
    """Optimization diverged (NaN loss or similar)."""


class CheckpointError(PlanarBfmError):
    """Checkpoint file corrupt or inconsistent with the requesting model."""
