"""Exception types shared across the package."""


class STDPGError(Exception):
    """Base class for all package errors."""


class MalformedRow(STDPGError, ValueError):
    def __init__(self, line, reason=""):
        self.line = line
        msg = f"malformed row at line {line}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyFile(STDPGError, ValueError):
    pass


class EmptyWindow(STDPGError):
    pass


class DomainError(STDPGError, ValueError):
    pass


class DegenerateError(STDPGError, FloatingPointError):
    pass


class ChainDiverged(STDPGError, RuntimeError):
    pass


class EmptyTrace(STDPGError, ValueError):
    pass


class LengthMismatch(STDPGError, ValueError):
    pass


class RejectionStall(STDPGError, RuntimeError):
    pass


class ConfigError(STDPGError, ValueError):
    pass
