"""Exception hierarchy shared by all modules.

Each exception maps to one CLI exit code (see ``qstress.cli``).
"""


class QStressError(Exception):
    """Base class for every error raised by this package."""


class MalformedCase(QStressError):
    """Case text is missing a section or holds an unparseable token."""


class InvalidTopology(QStressError):
    """Parsed case data violates a structural invariant."""


class AssumptionViolated(QStressError):
    """The load block of the susceptance matrix is not a connected M-matrix."""


class SingularSystem(QStressError):
    """A linear system that must be solved is numerically singular."""


class NotConverged(QStressError):
    """An iterative solver stopped without meeting its tolerance.

    The best iterate is attached as ``solution`` when one exists.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class InfeasibleBox(QStressError):
    """The secure voltage band maps to an empty threshold interval."""


class Infeasible(QStressError):
    """The stress LP has no feasible point."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class InternalError(QStressError):
    """A state that the problem structure rules out was reached."""


class DomainError(QStressError, ValueError):
    """Argument outside the domain of a special function."""


class PlantDiverged(QStressError):
    """The coupled power flow used as plant failed during a simulation."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
