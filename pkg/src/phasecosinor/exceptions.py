"""Exception and warning types raised by phasecosinor."""


class CosinorError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateAmplitude(CosinorError):
    """Phase is undefined because beta1 = beta2 = 0."""


class ResultantDegenerate(CosinorError):
    """Mean direction is undefined because the resultant vector vanishes."""


class SingularInformation(CosinorError):
    """The summed information matrix is numerically singular."""


class SingularBlock(CosinorError):
    """The (beta1, beta2) block of the fixed-effect covariance is singular."""


class InsufficientData(CosinorError):
    pass


class TooFewSamples(CosinorError):
    pass


class RankDeficient(CosinorError):
    pass


class NotEquispaced(CosinorError):
    pass


class NonPositiveVariance(CosinorError):
    pass


class NoUsableGenes(CosinorError):
    pass


class DegenerateCovariate(CosinorError):
    pass


class EmptyAfterFilter(CosinorError):
    pass


class NotConvergedWarning(UserWarning):
    """EM stopped at ``max_iter`` before meeting its tolerances."""


class ZeroCircularVarianceWarning(UserWarning):
    """A gene's circular variance is ~0; its aggregation weight was capped."""


class AdjustmentWarning(UserWarning):
    """A per-gene or per-individual contribution was dropped from the adjustment."""
