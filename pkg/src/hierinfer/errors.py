"""Exception types shared across the package."""


class HierInferError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidArgument(HierInferError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(HierInferError, ValueError):
    """A configuration file or mapping could not be ingested."""


class InfeasibleError(HierInferError):
    """No configuration satisfies the constraints.

    ``binding`` names the constraint that could not be met.
    """

    def __init__(self, message: str, binding: str | None = None):
        super().__init__(message)
        self.binding = binding


class CapacityError(HierInferError):
    """A simulated memory level would exceed its capacity."""

    def __init__(self, level: str, step: str, used: int, limit: int, hint: str = ""):
        msg = f"{level} capacity exceeded at step '{step}': {used} > {limit} bytes"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
        self.level = level
        self.step = step
        self.used = used
        self.limit = limit


class ScheduleHazardError(HierInferError):
    """Raised when metrics are requested for a schedule with hazards."""

    def __init__(self, report):
        super().__init__(f"schedule has {len(report.violations)} hazard(s)")
        self.report = report


class SimulationError(HierInferError):
    """The event loop exceeded its event budget or reached an inconsistent state."""
