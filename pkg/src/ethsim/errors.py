"""Exception hierarchy shared by all ethsim modules.

The CLI maps each family onto a distinct exit code, so callers can tell a bad
scenario file apart from a numerical breakdown or a resource limit.
"""


class EthsimError(Exception):
    """Base class for every error raised by ethsim."""

    exit_code = 1


class ValidationError(EthsimError, ValueError):
    """Input does not satisfy a documented precondition."""

    exit_code = 2


class ScenarioError(ValidationError):
    """A scenario file failed validation.

    Carries every problem found, not just the first one. Each entry is a
    ``"path.to.field: message"`` string.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid scenario")


class InvariantError(EthsimError, ArithmeticError):
    """A numerical invariant was violated during a computation."""

    exit_code = 3

    def __init__(self, invariant: str, residual: float, tolerance: float, detail: str = ""):
        self.invariant = invariant
        self.residual = float(residual)
        self.tolerance = float(tolerance)
        msg = f"invariant '{invariant}' violated: residual {residual:.3e} > tolerance {tolerance:.3e}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EigenSolverError(InvariantError):
    """The Hermitian eigensolver failed or returned an inaccurate factorisation."""


class ResourceCapError(EthsimError, MemoryError):
    """A requested dense dimension or node count exceeds the configured cap."""

    exit_code = 4
