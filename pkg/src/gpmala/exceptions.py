"""Exception types shared across the package."""


class GpmalaError(Exception):
    """Base class for package errors."""


class IllConditionedGramError(GpmalaError):
    """Gram matrix could not be factorized even after jitter escalation."""


class DegenerateLikelihoodError(GpmalaError):
    """A Monte-Carlo likelihood batch carries no usable information
    (nonpositive mean), so no log estimate can be formed."""


class InsufficientChainError(GpmalaError):
    """Chain post-processing would leave no retained states."""


class DegenerateSampleError(GpmalaError):
    """Sample covariance is singular and cannot back a KDE bandwidth."""
