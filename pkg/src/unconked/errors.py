"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad ranges, unknown keys, missing files."""


class RoiEstimationError(ValueError):
    """RoI estimation produced an empty mask; the image is unusable."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite; a checkpoint of the last finite
    state has been written before raising."""
