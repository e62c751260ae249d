class SimError(Exception):
    """Base class for simulator errors."""


class NoContiguity(SimError):
    """No free block of the requested order; compaction is needed."""


class UnknownBlock(SimError):
    """free_block() on a block that is not allocated at that geometry."""


class DoubleFree(UnknownBlock):
    pass


class OutOfMemory(SimError):
    pass


class OverlapError(SimError):
    pass


class NotReserved(SimError):
    pass


class AlignmentError(SimError):
    pass


class PartialWindow(SimError):
    """Promotion window has unmapped holes."""


class CompactionFailed(SimError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class GuestUnmapped(SimError):
    pass


class HostUnmapped(SimError):
    pass


class NoTargetRange(SimError):
    pass


class SpecInfeasible(SimError):
    pass


class TraceError(SimError):
    pass


class ParseError(TraceError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ConfigError(SimError):
    pass


class IncompatibleConfigs(ConfigError):
    pass
