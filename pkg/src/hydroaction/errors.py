"""Exception hierarchy shared by all engines."""


class HydroActionError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidConfigurationError(HydroActionError, ValueError):
    """An occupation vector lies outside ``[0, N_max]`` or is otherwise malformed."""


class ContractViolation(HydroActionError, ValueError):
    """A caller broke an operation precondition (e.g. non-adjacent sites)."""


class DivergenceError(HydroActionError):
    """The single-site partition series does not converge for this model/theta."""


class BoundaryError(HydroActionError, ValueError):
    """A density sits at or beyond the boundary of ``(0, N_max)``."""


class SectorSizeError(HydroActionError):
    """The canonical sector is larger than the configured state cap."""


class SolverError(HydroActionError):
    """An ODE/PDE integrator failed; ``time`` records where."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class QuadratureError(HydroActionError):
    """Time quadrature did not reach the requested tolerance."""


class InconsistencyError(HydroActionError):
    """Nonzero current on a pair with zero mobility."""


class EllipticSolverError(HydroActionError):
    """The weighted elliptic solve did not converge."""


class MassMismatchError(HydroActionError, ValueError):
    """Two densities compared in Wasserstein distance carry different mass."""


class EnvelopeViolationError(HydroActionError):
    """Thinning envelope was smaller than an actual rate; the bound is wrong."""


class ConfigError(HydroActionError, ValueError):
    """Schema violation in a JSON experiment config.

    ``pointer`` is a JSON-pointer-like path to the offending key.
    """

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer
