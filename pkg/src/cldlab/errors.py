"""Exception hierarchy shared across the package.

Every public operation raises one of these instead of bare ValueError so
callers (and the CLI exit-code mapping) can tell input mistakes apart from
numeric blowups.
"""


class CldlabError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CldlabError, ValueError):
    """A table's shape does not match the declared latent spaces."""


class NotStochastic(CldlabError, ValueError):
    """A probability-table row does not sum to 1 within tolerance.

    Carries the offending row index and its actual sum.
    """

    def __init__(self, table_name, row_index, row_sum):
        self.table_name = table_name
        self.row_index = row_index
        self.row_sum = row_sum
        super().__init__(
            f"{table_name}: row {row_index} sums to {row_sum!r}, expected 1"
        )


class MixedVariants(CldlabError, ValueError):
    """A coherence check was given domains of different structural variants."""


class UnknownFixture(CldlabError, KeyError):
    """Requested canonical fixture name is not recognized."""


class NonFiniteActivation(CldlabError, FloatingPointError):
    """A forward pass produced NaN or infinity (exploded parameters)."""


class TooFewDomains(CldlabError, ValueError):
    """A multi-domain objective was given fewer domains than it needs."""


class TooFewExamples(CldlabError, ValueError):
    """A statistic needs more examples per group than were provided."""


class UnlabeledPair(CldlabError, ValueError):
    """A labeled-pair objective received a pair without a label."""


class EmptyPureSet(CldlabError, ValueError):
    """Pure-set pair composition was given no pure elements."""


class InvalidDistribution(CldlabError, ValueError):
    """A vector claimed to be a probability distribution is not one."""


class ConfigError(CldlabError, ValueError):
    """An experiment config is invalid; `field` holds the offending path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
