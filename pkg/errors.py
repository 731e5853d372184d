from typing import Optional


class MixfitError(Exception):
    '''
    Base class for every error raised by the fitting library.
    The CLI maps `exit_code` straight to the process exit status.
    '''
    exit_code = 1
    type = "generic.error"

    def __init__(self, *args, type: Optional[str] = None, **kwargs):
        super().__init__(*args, **kwargs)
        if type is not None:
            self.type = type


#==================================================================#
#  Configuration and input problems (exit 1)
#==================================================================#
class ConfigError(MixfitError):
    exit_code = 1
    type = "config.invalid"


class DataError(ConfigError):
    type = "data.invalid"


class CsvParseError(DataError):
    type = "data.parse"

    def __init__(self, message, row: Optional[int] = None, column: Optional[int] = None, **kwargs):
        self.row = row
        self.column = column
        if row is not None:
            message = "{} (row {}, column {})".format(message, row, column)
        super().__init__(message, **kwargs)


class RaggedRowError(CsvParseError):
    type = "data.ragged_row"


class ConstantColumnError(DataError):
    type = "data.constant_column"

    def __init__(self, column: int, **kwargs):
        self.column = column
        super().__init__("Column {} is constant; ranks are undefined".format(column), **kwargs)


class ChecksumError(DataError):
    type = "data.checksum"


#==================================================================#
#  Numerical failures (exit 2)
#==================================================================#
class NumericalError(MixfitError):
    exit_code = 2
    type = "numerical.error"


class AdDomainError(NumericalError):
    type = "numerical.autodiff_domain"

    def __init__(self, op: str, node: int, value, **kwargs):
        self.op = op
        self.node = node
        super().__init__("{} evaluated on non-positive input {!r} at tape node {}".format(op, value, node), **kwargs)


class SingularCovarianceError(NumericalError):
    type = "numerical.singular_covariance"


class DegenerateMarginalError(NumericalError):
    type = "numerical.degenerate_marginal"


class RankDeficiencyError(NumericalError):
    type = "numerical.rank_deficiency"


class DivergenceError(NumericalError):
    '''
    Raised when an objective turns non-finite. `best_x` holds the best
    parameter vector seen before the failure and `trace` the rows recorded
    so far. Fitters that know their layout also fill in `params`.
    '''
    type = "numerical.divergence"

    def __init__(self, message, best_x=None, trace=None, params=None, **kwargs):
        self.best_x = best_x
        self.trace = trace
        self.params = params
        super().__init__(message, **kwargs)


class RestartsExhaustedError(DivergenceError):
    '''
    Every restart failed. Carries the partial result of the failed restart
    whose trace got furthest, and the individual errors in seed order.
    '''
    type = "numerical.restarts_exhausted"

    def __init__(self, message, errors=(), **kwargs):
        self.errors = list(errors)
        super().__init__(message, **kwargs)
