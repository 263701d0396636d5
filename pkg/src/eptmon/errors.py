"""Exception hierarchy shared by every simulator layer."""


class SimulatorError(Exception):
    """Base class for all errors raised by eptmon."""


class OutOfBounds(SimulatorError, IndexError):
    """A physical access fell outside host memory."""


class OutOfMemory(SimulatorError):
    """No free frames remain in an allocator."""


class ConfigError(SimulatorError, ValueError):
    """Bad machine, range or trace configuration (non-canonical VA, bad size...)."""


class NoMapping(SimulatorError, LookupError):
    """The guest leaf page-table entry for a VA does not exist."""


class Uncovered(SimulatorError, LookupError):
    """A guest-physical address lies beyond an EPT hierarchy's span."""


class OverlappingRanges(SimulatorError, ValueError):
    """SRC and DST ranges (or their pages) intersect."""


class ProtocolViolation(SimulatorError):
    """A VM exit arrived that the view state machine cannot produce."""


class SpuriousMtf(ProtocolViolation):
    """An MTF exit arrived with no single-step armed."""


class TraceFault(SimulatorError):
    """The guest took a #PF that no backend handles."""


class ParseError(SimulatorError, ValueError):
    """Malformed config, trace, log, symbol map or report input."""

    def __init__(self, message: str, line_no: int | None = None, line: str | None = None):
        self.line_no = line_no
        self.line = line
        if line_no is not None:
            message = f"line {line_no}: {message}"
            if line is not None:
                message += f": {line!r}"
        super().__init__(message)
