"""Exception types raised across the package."""


class StructuralError(ValueError):
    """Shapes, index ranges or probability tables are malformed."""


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


class ConfigurationError(ValueError):
    """An experiment or model class cannot be set up as requested."""


class NumericalError(ArithmeticError):
    """A quantity that must be PSD/finite came out otherwise beyond tolerance."""
