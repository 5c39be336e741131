"""Exception types raised across the package."""


class KernelEPError(Exception):
    """Base class for every error raised by kernel_ep."""


class NonFiniteInput(KernelEPError, ValueError):
    pass


class ImproperParameters(KernelEPError, ValueError):
    pass


class ImproperInput(KernelEPError, ValueError):
    """A message that must be proper (normalisable) was not."""


# Same condition, the feature code talks about messages rather than inputs.
ImproperMessage = ImproperInput


class FamilyMismatch(KernelEPError, ValueError):
    pass


class DegenerateStats(KernelEPError, ValueError):
    """Sufficient statistics that no member of the family can match."""


class NoConvergence(KernelEPError, RuntimeError):
    pass


class OutOfSupport(KernelEPError, ValueError):
    pass


class DegenerateWeights(KernelEPError, RuntimeError):
    """Importance weights collapsed below the effective-sample-size floor."""


class AllZeroWeights(KernelEPError, ValueError):
    pass


class QuadratureNonConvergence(KernelEPError, RuntimeError):
    pass


class ArityMismatch(KernelEPError, ValueError):
    pass


class DimensionOverflow(KernelEPError, ValueError):
    pass


class DimensionMismatch(KernelEPError, ValueError):
    pass


class EmptyDataset(KernelEPError, ValueError):
    pass


class OperatorFailure(KernelEPError, RuntimeError):
    pass


class AllMessagesImproper(KernelEPError, RuntimeError):
    pass


class FactorizationFailure(KernelEPError, RuntimeError):
    pass


class BrokenPosterior(KernelEPError, RuntimeError):
    pass


class VersionMismatch(KernelEPError, ValueError):
    pass


class IoFailure(KernelEPError, OSError):
    pass


class ParseError(KernelEPError, ValueError):
    pass


class NonNumericFeature(ParseError):
    pass


class SingleClassDataset(KernelEPError, ValueError):
    pass


class PreconditionError(KernelEPError, ValueError):
    pass


class DegeneratePairsWarning(UserWarning):
    """All pairwise embedding distances were zero; a fallback width was used."""
