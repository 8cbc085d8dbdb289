"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A kernel or model parameter violates its constraint (e.g. sigma <= 0)."""


class ValidationError(ValueError):
    """Data fails a structural constraint (event outside window, bad shapes)."""


class CsvFormatError(ValueError):
    """A catalog CSV file cannot be parsed; message carries the line number."""


class StabilityError(ValueError):
    """The excitation matrix has spectral radius >= 1; simulation would explode."""


class BudgetError(RuntimeError):
    """A requested computation exceeds the configured memory/compute budget."""


class NumericsError(RuntimeError):
    """The optimizer hit a non-finite loss/gradient or diverged."""
