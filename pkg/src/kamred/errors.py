"""Exception taxonomy shared by all kamred modules."""

from __future__ import annotations


class KamredError(Exception):
    """Base class for all package errors."""


class ValidationError(KamredError):
    """Bad user input: malformed config, out-of-range parameter, shape mismatch."""


class GridTooSmallError(KamredError):
    """Spatial grid does not resolve the classically allowed region."""


class EigensolveError(KamredError):
    """Eigensolve failed to meet its residual tolerance."""


class PeriodDetectionError(KamredError):
    """Closed orbit of the classical flow could not be detected."""


class QuadratureError(KamredError):
    """A quadrature failed its convergence check."""


class ResidualError(KamredError):
    """A homological solve failed its residual functional."""

    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class ResonanceError(KamredError):
    """A small divisor violated the active Diophantine bound.

    Carries a certificate naming the offending (i, j, k) triple.
    """

    def __init__(self, i, j, k, divisor, bound, stage=None):
        self.i = int(i)
        self.j = int(j)
        self.k = tuple(int(c) for c in k)
        self.divisor = float(divisor)
        self.bound = float(bound)
        self.stage = stage
        where = f" at stage {stage}" if stage is not None else ""
        super().__init__(
            f"small divisor violation{where}: (i={self.i}, j={self.j}, k={self.k}) "
            f"|divisor|={self.divisor:.3e} < bound={self.bound:.3e}"
        )

    def certificate(self):
        return {
            "i": self.i,
            "j": self.j,
            "k": list(self.k),
            "divisor": self.divisor,
            "bound": self.bound,
            "stage": self.stage,
        }


class NonContractionError(KamredError):
    """An iteration that should contract quadratically failed to do so."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class BoundViolationError(KamredError):
    """A verified inequality failed; carries the serialized counterexample."""

    def __init__(self, message, counterexample=None):
        super().__init__(message)
        self.counterexample = counterexample
