"""Exception types shared across the package."""


class RwreError(Exception):
    """Base class for all package-specific errors."""


class KappaOutOfRange(RwreError):
    """Ellipticity floor must satisfy 0 < kappa < 1/(2d)."""


class InfeasibleDisorder(RwreError):
    """Requested disorder cannot keep every kernel entry at or above kappa."""


class BadMixingRange(RwreError):
    """Mixing parameters are inconsistent with each other or with the window."""


class WindowExhausted(RwreError):
    """A walk stepped outside the sampled window under the strict policy."""


class UnsupportedLaw(RwreError):
    """Exact computation needs an iid law with enumerable kernel branches."""


class DegenerateDenominator(RwreError):
    """Denominator of a ratio estimator vanished."""


class InvalidCoupling(RwreError):
    """Coupling weight outside the admissible range for the tag alphabet."""


class ResidualNegative(RwreError):
    """Coupling weight exceeds a kernel entry, so the residual law is negative."""


class ZNotInterior(RwreError):
    """Tilt target velocity must lie in the open l1 unit ball."""


class EnumerationTooLarge(RwreError):
    """Exhaustive enumeration would exceed the term budget."""


class EmptyRun(RwreError):
    """Experiment configuration produced no work."""


class UngatedRun(RwreError):
    """Identity suite has not passed for this output directory."""
