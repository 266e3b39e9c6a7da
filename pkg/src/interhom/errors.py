"""Exception taxonomy shared by all modules.

Every error raised on purpose by this package derives from ToolkitError, so
callers (and the CLI) can tell our failures from genuine bugs.
"""


class ToolkitError(Exception):
    """Base class for errors raised by this package."""


class StructuralError(ToolkitError):
    """Fields on mismatched grids, wrong shapes, malformed field data."""


class OutOfDomainError(ToolkitError):
    """A probe (ball, point, radius scan) leaves the grid extent."""


class MediaError(ToolkitError):
    """Malformed or unusable media description."""


class EllipticityError(ToolkitError):
    """Ellipticity certificate failed; the message names the offending cell."""


class SolverError(ToolkitError):
    """Linear solve failed to reach tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CompatibilityError(ToolkitError):
    """Unsolvable right-hand side, e.g. nonzero mean on a periodic grid."""


class CertificationError(ToolkitError):
    """A certified discrete identity failed (energy bound, flux identity,
    stage residual).  The message names the stage or check."""


class DegenerateBasisError(ToolkitError):
    """Normal equations of a fit met a numerically singular Gram matrix."""


class FitError(ToolkitError):
    """A least-squares summary has too little or unusable data."""


class ConfigError(ToolkitError):
    """Unusable run configuration."""
