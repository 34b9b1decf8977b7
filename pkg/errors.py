"""Exception types shared by the library and mapped to CLI exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFICATION = 4


class SBAError(Exception):
    exit_code = 1


class ConfigError(SBAError):
    """Invalid experiment configuration. `field_path` points at the offending entry."""
    exit_code = EXIT_CONFIG

    def __init__(self, message, field_path=None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class NumericalError(SBAError):
    exit_code = EXIT_NUMERICAL


class RankDeficiencyError(NumericalError):
    pass


class CholeskyError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, step=None, diagnostics=None):
        self.step = step
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class InsufficientSamplesError(NumericalError):
    pass


class VerificationError(SBAError):
    exit_code = EXIT_VERIFICATION

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
