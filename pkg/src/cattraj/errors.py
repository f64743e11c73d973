"""Exception hierarchy shared across the package.

Two broad families matter to callers: configuration problems (bad input
files, violated model invariants) and numerical failures discovered while
a simulation is running.  The command line maps them to exit codes 2 and 3
respectively.
"""


class CattrajError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CattrajError):
    """Invalid configuration, model file, or experiment description."""


class NumericalError(CattrajError):
    """A simulation reached a numerically impossible or corrupt state."""


class NormalizationViolation(ConfigError):
    """Superposition weights do not satisfy the unit-norm constraint."""

    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"drive weights violate normalization, residual {residual:.3e}")


class NonFiniteWaveform(ConfigError):
    """Waveform evaluation produced NaN or Inf."""


class DimensionOverflow(NumericalError):
    """Requested tensor-product dimension exceeds the configured maximum."""


class ZeroNorm(NumericalError):
    """Total trajectory weight vanished; the trajectory is impossible."""


class GridExhausted(NumericalError):
    """A collision step was requested past the end of the time grid."""


class NegativeIntensity(NumericalError):
    """Counting intensity is negative beyond tolerance; state is corrupt."""


class JumpAtZeroIntensity(NumericalError):
    """A jump was demanded while the click intensity is (numerically) zero."""


class TruncationTooSmall(NumericalError):
    """Fock-space truncation cannot represent the requested coherent state."""
