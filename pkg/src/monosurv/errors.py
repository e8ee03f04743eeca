"""Exception hierarchy shared by the package and the command line."""


class MonosurvError(Exception):
    exit_code = 1


class UsageError(MonosurvError):
    """Caller misused an API or the command line."""

    exit_code = 2


class ConfigurationError(UsageError):
    pass


class InputError(MonosurvError):
    """Bad numeric input (non-finite values, wrong lengths, unsorted grids)."""

    exit_code = 3


class DataError(InputError):
    """A data file could not be parsed. Carries the row/column when known."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class TrainingError(MonosurvError):
    exit_code = 4

    def __init__(self, message, record_index=None, diagnostics=None):
        if record_index is not None:
            message = f"{message} (record {record_index})"
        super().__init__(message)
        self.record_index = record_index
        self.diagnostics = diagnostics or {}


class UndefinedMetricError(MonosurvError):
    """Metric has no defined value on the given sample (e.g. no comparable pairs)."""


class GradientCheckError(MonosurvError):
    def __init__(self, message, index):
        super().__init__(f"{message} (parameter {index})")
        self.index = index
