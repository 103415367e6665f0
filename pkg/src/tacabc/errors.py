"""Exception and warning types shared across the package."""


class TacAbcError(Exception):
    """Base class for all package-specific errors."""


class FormatError(TacAbcError):
    """A file does not conform to the expected on-disk format."""


class GridMismatch(TacAbcError):
    """Two objects were combined that live on different time grids."""


class NegativeActivity(TacAbcError):
    """Activity values must be non-negative for count-based noise."""


class SingularStep(TacAbcError):
    """The implicit update coefficient of the forward solver is <= 0.

    Signals nonphysical parameters at the given step size.
    """


class KindMismatch(TacAbcError):
    """Distance requested between summaries of different kinds or lengths."""


class MissingContext(TacAbcError):
    """A summary kind needs context (library, scales) that was not supplied."""


class DegenerateFit(TacAbcError):
    """GCV selected the interpolation limit on data with no spread."""


class RankDeficient(TacAbcError):
    """The weighted normal system is singular to working precision."""


class NoValidFit(TacAbcError):
    """Every timing in the basis library produced a singular system."""


class EmptyPosterior(TacAbcError):
    """No accepted samples where at least one was required."""


class EmptyPosteriorWarning(UserWarning):
    """Rejection kept zero samples; the returned posterior is empty."""


class BoundarySmoothingWarning(UserWarning):
    """GCV selected an endpoint of the smoothing-parameter grid."""


class SmallPosteriorWarning(UserWarning):
    """Predictive bands computed from fewer than 100 posterior draws."""
