"""Error types shared across the package.

All of these derive from ValueError so callers that only care about
"the input was bad" can catch a single type.
"""

from __future__ import annotations


class QfrobError(ValueError):
    """Base class for package-specific errors."""


class NonSymplecticError(QfrobError):
    """Raised when a series fails a symplectic divisibility or residual check.

    This is always an error, never a silent fallback: the divisibility of
    quadratic tails by w + z (or 1/w + 1/z) is exactly the symplectic
    property, and a failure means the input operator is not admissible.
    """


class WindowError(QfrobError):
    """Raised when a series coefficient outside the reliable window is read."""


class GradingError(QfrobError):
    """Raised when a Fock-space operation receives data in unstable slots.

    The genus expansion is only graded (and exponentials only finite) when
    every genus-0 term carries at least three insertions and every genus-1
    term at least one.
    """


class CapExceededError(QfrobError):
    """Raised when an operation would need coefficients beyond the stored caps."""
