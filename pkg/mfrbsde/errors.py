"""Exception types shared by the library and the command line."""


class MfrbsdeError(Exception):
    """Base class; `exit_code` is what the CLI returns for it."""

    exit_code = 3

    def to_dict(self) -> dict:
        return {
            "type": type(self).__name__,
            "message": str(self),
            "exit_code": self.exit_code,
        }


class ValidationError(MfrbsdeError, ValueError):
    """Bad input: shapes, preconditions, config contents."""

    exit_code = 2


class NumericalError(MfrbsdeError, ArithmeticError):
    """Blow-up, singular regression, non-contracting fixed point."""

    exit_code = 3


class FeasibilityError(NumericalError):
    """A feasibility flow failed to reach or keep H >= 0."""


__all__ = ["MfrbsdeError", "ValidationError", "NumericalError", "FeasibilityError"]
