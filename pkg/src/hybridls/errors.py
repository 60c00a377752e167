"""Exception hierarchy shared by all modules."""


class HybridLSError(Exception):
    """Base class for errors raised by hybridls."""


class ConfigError(HybridLSError):
    """Invalid experiment configuration or CLI arguments."""


class NumericalError(HybridLSError):
    """A numerical routine could not produce a valid result."""


class RankDeficiencyError(NumericalError):
    """A matrix that must have full column rank does not.

    Attributes
    ----------
    rank : int
        Numerical rank that was detected.
    expected : int
        Rank that was required.
    """

    def __init__(self, rank, expected, message=None):
        self.rank = int(rank)
        self.expected = int(expected)
        self.deficit = self.expected - self.rank
        if message is None:
            message = (f"numerical rank {self.rank} < {self.expected} "
                       f"({self.deficit} deficient direction(s))")
        super().__init__(message)


class QuadratureError(NumericalError):
    """Integrand returned non-finite values at a quadrature node."""

    def __init__(self, node, value):
        self.node = node
        self.value = value
        super().__init__(f"non-finite integrand value {value!r} at node {list(node)!r}")


class SamplingError(NumericalError):
    """Inverse-CDF sampling lost its bracket."""


class StageError(HybridLSError):
    """Failure inside one stage of a pipeline, tagged with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
