"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit codes (2 config, 3 capability, 4 runtime).
"""


class RiskProbeError(Exception):
    exit_code = 4


class ConfigError(RiskProbeError, ValueError):
    exit_code = 2


class IllegalThreatModel(ConfigError):
    """Raised for the (black-box, no auxiliary data) cell or unknown cells."""


class CapabilityError(RiskProbeError):
    """A white-box operation was requested through a black-box handle."""

    exit_code = 3


class DatasetTooSmall(RiskProbeError, ValueError):
    pass


class InvalidFraction(RiskProbeError, ValueError):
    pass


class EmptyDataset(RiskProbeError, ValueError):
    pass


class ShapeMismatch(RiskProbeError, ValueError):
    pass


class DegenerateLabels(RiskProbeError, ValueError):
    """Only one class is present where at least two are required."""


class ClassMissing(RiskProbeError, ValueError):
    pass


class InvalidBudget(RiskProbeError, ValueError):
    pass


class InfeasibleBudget(RiskProbeError, ValueError):
    pass


class BudgetExhausted(RiskProbeError):
    pass


class ZeroVariance(RiskProbeError, ValueError):
    pass
