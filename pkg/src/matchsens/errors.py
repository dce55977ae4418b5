"""Exception hierarchy.

``DataError`` subclasses signal bad input (CLI exit code 2);
``NumericalError`` subclasses signal fitting failures (CLI exit code 3).
"""

from __future__ import annotations


class MatchSensError(Exception):
    """Base class for all package errors."""


class DataError(MatchSensError, ValueError):
    """Invalid input data or configuration."""


class MissingColumn(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing column {column!r}")


class NonBinaryTreatment(DataError):
    def __init__(self, column: str, line: int | None, value):
        self.column = column
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(
            f"{where}treatment column {column!r} must be 0 or 1, got {value!r}"
        )


class NonFiniteValue(DataError):
    def __init__(self, column: str, line: int | None, value):
        self.column = column
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}column {column!r} has non-finite value {value!r}")


class SingletonSet(DataError):
    def __init__(self, set_id: str):
        self.set_id = set_id
        super().__init__(f"matched set {set_id!r} has a single member")


class SetWithoutBothArms(DataError):
    def __init__(self, set_id: str):
        self.set_id = set_id
        super().__init__(
            f"matched set {set_id!r} must contain a treated and a control subject"
        )


class ZeroVariance(DataError):
    def __init__(self, covariate: str):
        self.covariate = covariate
        super().__init__(f"continuous covariate {covariate!r} is constant")


class TooManyVariables(DataError):
    def __init__(self, n: int, cap: int):
        self.n = n
        self.cap = cap
        super().__init__(f"{n} variables requested; subset enumeration is capped at {cap}")


class NoTreated(DataError):
    def __init__(self):
        super().__init__("no treated subjects to match")


class NoControl(DataError):
    def __init__(self):
        super().__init__("no control subjects to match")


class NumericalError(MatchSensError, ArithmeticError):
    """A model fit could not be computed."""


class RankDeficient(NumericalError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"design is rank deficient in {', '.join(self.names)}")


class Separation(NumericalError):
    def __init__(self, detail: str = ""):
        super().__init__("logistic fit diverged (separation)" + (f": {detail}" if detail else ""))


class SingularInformation(NumericalError):
    def __init__(self, detail: str = ""):
        super().__init__("singular logistic information matrix" + (f": {detail}" if detail else ""))


class TooManyFailures(NumericalError):
    def __init__(self, n_failed: int, n_boot: int):
        self.n_failed = n_failed
        self.n_boot = n_boot
        super().__init__(f"{n_failed} of {n_boot} bootstrap replicates failed")
