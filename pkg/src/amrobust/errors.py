"""Exception types shared across the package.

The CLI maps these onto process exit codes, so solver and builder code
should raise the specific class rather than a bare Exception.
"""


class AmrobustError(Exception):
    """Base class for package errors."""

    exit_code = 1


class SchemaError(AmrobustError):
    """Config, lattice or measure file fails schema validation or parsing."""

    exit_code = 4


class CapExceededError(AmrobustError):
    """A configured enumeration cap (paths, nodes, rules) would be exceeded."""

    exit_code = 3


class InfeasibleError(AmrobustError):
    """The requested scenario class is empty or an LP has no feasible point."""

    exit_code = 2


class SurvivalHitZeroError(InfeasibleError):
    """Conditional survival vanished on a charged atom during decomposition.

    The standard repair is to apply the epsilon modification to the input
    measure first; the message says so explicitly.
    """


class LPNumericalError(AmrobustError):
    """The LP solver could not certify its answer within tolerance."""


class NonAdaptedError(AmrobustError):
    """A process that must be adapted varies inside a filtration atom."""


class UnboundedError(AmrobustError):
    """An LP objective is unbounded over the feasible region."""
