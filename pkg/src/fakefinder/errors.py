"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation/parse/contract problems
exit 2, compatibility problems (checkpoint/config disagreement, shape
mismatches) exit 3, everything else (including numerics) exits 1.
"""


class ShapeError(ValueError):
    """Operand shapes outside the supported patterns."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class StateError(RuntimeError):
    """An object was driven through an illegal state transition."""


class NumericsError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ManifestError(ValueError):
    """A manifest file could not be parsed; message carries the line number."""


class ValidationError(ValueError):
    """User-supplied configuration or data failed validation."""


class CompatibilityError(RuntimeError):
    """Checkpoint and configuration disagree (version, architecture, stage)."""
