"""Exception hierarchy. The CLI maps each branch to an exit code."""


class PzmsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PzmsError):
    exit_code = 2


class ZoneTooSmallError(ConfigError):
    """No placebo threshold fits the zone under the largest bandwidths."""


class DataError(PzmsError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyInputError(DataError):
    pass


class NumericalError(PzmsError):
    exit_code = 4


class SingularDesignError(NumericalError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ThinWindowError(NumericalError):
    pass


class DegenerateWindowError(NumericalError):
    pass


class UndefinedAutocorrelationError(NumericalError):
    pass
