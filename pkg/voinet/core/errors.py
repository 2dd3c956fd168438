class VoinetError(Exception):
    """Base class for failures raised by the simulation engine."""


class DimensionError(VoinetError, ValueError):
    pass


class NumericalError(VoinetError, ArithmeticError):
    pass


class ChannelStateError(VoinetError, RuntimeError):
    pass


class UnsupportedConfigurationError(VoinetError, ValueError):
    pass


class ScenarioValidationError(VoinetError, ValueError):
    """Raised when a scenario with invariant violations is compiled."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"Scenario has {len(self.violations)} violation(s): {lines}{more}")
