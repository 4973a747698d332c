"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4.
"""


class SurfsplatError(Exception):
    """Base class for all package errors."""


class ConfigError(SurfsplatError):
    """Invalid configuration value or combination."""


class DataError(SurfsplatError):
    """Missing, malformed, or inconsistent input data."""


class BehindCameraError(SurfsplatError):
    """A point at or behind the camera plane was projected."""


class NonFiniteGradientError(SurfsplatError):
    """A gradient fed to the optimizer contained NaN or infinity."""

    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block '{block}'")
        self.block = block


class DivergenceError(SurfsplatError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, stage: str, iteration: int):
        super().__init__(f"{stage}: non-finite loss at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration
