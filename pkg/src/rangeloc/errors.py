"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised for non-finite, negative or otherwise malformed inputs."""


class DegenerateConfiguration(ValueError):
    """Geometry for which a quantity is undefined (coincident vehicles, collinear fleets)."""


class InconsistentRanges(ValueError):
    """Range triple violating the triangle inequality beyond the allowed slack."""


class NotReady(RuntimeError):
    """Not enough data collected yet; the caller should keep feeding samples."""


class StaleInput(RuntimeError):
    """A required input (motion sample, clock estimate) is missing or too old."""


class InitializationError(RuntimeError):
    """The initialization pipeline could not produce a frame or initial poses."""


class ScenarioError(ValueError):
    """Scenario file failed validation."""
