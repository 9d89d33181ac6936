"""Exception taxonomy.

The CLI maps these onto distinct exit codes so that pipelines can branch on
mathematical outcomes (an undecided kernel dimension is not a crash).
"""


class SolitonLabError(Exception):
    """Base class for all library errors."""


class UsageError(SolitonLabError):
    """Invalid configuration or arguments."""


class PreconditionError(SolitonLabError):
    """An operation was called outside its stated domain of validity."""


class AtlasMismatchError(PreconditionError):
    """Fields living on different atlases were combined."""


class NotPositiveDefiniteError(PreconditionError):
    """A candidate metric failed the pointwise positivity check."""

    def __init__(self, chart, index, message=None):
        self.chart = chart
        self.index = index
        super().__init__(
            message
            or f"metric not positive definite at chart {chart}, node {index}"
        )


class NotEinsteinError(PreconditionError):
    """Input metric is not Einstein within tolerance."""

    def __init__(self, max_deviation, tol):
        self.max_deviation = max_deviation
        self.tol = tol
        super().__init__(
            f"metric is not Einstein: max |Ric - c*g| = {max_deviation:.3e} "
            f"exceeds tolerance {tol:.3e}"
        )


class NotSolitonError(PreconditionError):
    """Base pair fails the normalized-soliton residual check."""


class ConstraintViolationError(PreconditionError):
    """Pair violates the e^{-f} volume normalization constraint."""

    def __init__(self, measured, tol):
        self.measured = measured
        self.tol = tol
        super().__init__(
            f"normalization constraint violated: |(2pi)^(-n/2) int e^-f mu - 1|"
            f" = {measured:.3e} exceeds {tol:.3e}"
        )


class UndecidedError(SolitonLabError):
    """A kernel dimension or certificate could not be decided at this
    resolution (no spectral gap).  A valid scientific outcome, not a crash."""


class InsufficientSpectrumError(SolitonLabError):
    """Spectrum table too short to decide membership."""

    def __init__(self, required_k_max):
        self.required_k_max = required_k_max
        super().__init__(
            f"spectrum table too short to decide; rebuild with k_max >= "
            f"{required_k_max}"
        )
