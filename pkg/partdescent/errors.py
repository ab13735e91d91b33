class PartDescentError(Exception):
    """Base error; `exit_code` is what the CLI returns when it surfaces."""

    exit_code = 2


class ConfigError(PartDescentError):
    exit_code = 1


class LayoutError(ConfigError, ValueError):
    pass


class GraphError(ConfigError, ValueError):
    pass


class NumericalError(PartDescentError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ToleranceNotMetError(NumericalError):
    def __init__(self, message, residual, iterations):
        super().__init__(f"{message}: residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


class AuditError(PartDescentError):
    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ProtocolError(AuditError):
    pass
