"""Exception hierarchy.  Each class carries the CLI exit code it maps to."""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CAPABILITY = 5


class PpbootError(Exception):
    exit_code = EXIT_NUMERIC


# usage / configuration
class ParameterError(PpbootError, ValueError):
    exit_code = EXIT_USAGE


class SizeError(ParameterError):
    pass


class AllocationError(ParameterError):
    pass


class CapacityError(ParameterError):
    pass


class ShapeError(ParameterError):
    pass


class InsufficientReplicatesError(ParameterError):
    pass


class ConfigError(ParameterError):
    pass


# input files
class IngestionError(PpbootError):
    exit_code = EXIT_IO


# numerical failures
class DegeneratePopulationError(PpbootError):
    pass


class ConvergenceError(PpbootError):
    def __init__(self, msg: str, residual: float = float("nan")):
        super().__init__(f"{msg} (final residual {residual:.3e})")
        self.residual = residual


class SamplingError(PpbootError):
    pass


class EstimationError(PpbootError):
    pass


class CalibrationInfeasibleError(PpbootError):
    pass


class MomentError(PpbootError):
    pass


class DegenerateVarianceError(PpbootError):
    pass


class BuilderFailure(PpbootError):
    pass


# missing inputs for the requested method
class CapabilityError(PpbootError):
    exit_code = EXIT_CAPABILITY
