"""Exception hierarchy shared across the package."""


class MPLCError(Exception):
    """Base class for all errors raised by :mod:`mplc`."""


class GridMismatchError(MPLCError, ValueError):
    pass


class DegenerateFieldError(MPLCError, ValueError):
    pass


class ConfigurationError(MPLCError, ValueError):
    """Invalid user configuration.

    ``path`` names the offending field (``"stages[1].batch_size"``) when known,
    ``line``/``column`` locate syntax errors in a config document.
    """

    def __init__(self, message, path=None, line=None, column=None):
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column

    def as_record(self):
        rec = {"error": type(self).__name__, "message": str(self)}
        for key in ("path", "line", "column"):
            val = getattr(self, key)
            if val is not None:
                rec[key] = val
        return rec


class NonFiniteGradientError(MPLCError, FloatingPointError):
    pass


class StageFailedError(MPLCError, RuntimeError):
    """A training stage diverged or produced non-finite values.

    ``log`` carries the run log of every stage completed before the failure.
    """

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class BundleError(MPLCError, IOError):
    pass
