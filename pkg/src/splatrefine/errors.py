"""Exception hierarchy shared by all modules."""


class SplatRefineError(Exception):
    """Base class for every error raised by this package."""


class FormatError(SplatRefineError):
    """A file did not follow its declared text or binary layout.

    ``record`` is the zero-based record index (scenes) and ``line`` the
    one-based line number (match files) when the problem can be localised.
    """

    def __init__(self, message, *, record=None, line=None):
        super().__init__(message)
        self.record = record
        self.line = line


class InvariantError(FormatError):
    """A value parsed fine but violates a type invariant."""


class DegenerateError(SplatRefineError):
    """Input geometry or data is rank deficient for the requested fit."""


class CovisibilityError(SplatRefineError):
    """Two views do not share enough visible surface."""


class NoSolutionError(SplatRefineError):
    """RANSAC could not find an acceptable pose.

    ``diagnostics`` carries the best-effort consensus statistics.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ScaleRecoveryError(SplatRefineError):
    """Rendered depth and point map overlap too little to fix the scale."""


class MatcherError(SplatRefineError):
    """An external matcher did not produce usable output."""
