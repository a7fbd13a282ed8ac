"""Exception types shared across the package.

The hierarchy mirrors how failures are reported at the CLI boundary:
usage problems, data/feasibility problems, and numerical problems map to
distinct exit codes.
"""


class FolioError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FolioError):
    """Operation received tensors whose shapes do not conform."""

    def __init__(self, op, shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"shape mismatch in op '{op}': {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(FolioError):
    """An input lies outside an operation's documented domain."""


class ContractError(FolioError):
    """A caller violated a documented precondition."""


class InfeasibleConstraintError(FolioError):
    """The requested constraint set cannot be satisfied for this universe."""

    def __init__(self, inequality, detail=""):
        self.inequality = inequality
        msg = f"infeasible constraint set: requires {inequality}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(FolioError):
    """Malformed or unusable input data."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)


class DegenerateDataError(DataError):
    """Data produced a degenerate statistical object (e.g. non-PD covariance)."""

    def __init__(self, message):
        super().__init__(message)


class NumericalError(FolioError):
    """A numerical computation failed (NaN/Inf, divergence)."""
