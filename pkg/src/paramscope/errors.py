"""Exception hierarchy shared across the package."""


class ParamScopeError(Exception):
    """Base class for all domain errors."""


class DomainError(ParamScopeError):
    """A failure caused by the data itself (CLI exit code 2)."""


# checkpoint-io
class ContainerError(ParamScopeError):
    pass


class MalformedHeader(ContainerError):
    pass


class OutOfBounds(ContainerError):
    pass


class UnsupportedDtype(ContainerError):
    pass


class UnknownTensor(ContainerError, KeyError):
    pass


class NonFiniteValues(DomainError):
    pass


# spectral-core
class ConvergenceFailure(DomainError):
    pass


class FitError(DomainError):
    pass


class DegenerateTail(FitError):
    pass


class TooFewEigenvalues(FitError):
    pass


class AllZeroSpectrum(DomainError):
    pass


class NoBulk(DomainError):
    pass


# dynamics
class ShapeMismatch(DomainError, ValueError):
    pass


class ZeroBase(DomainError):
    pass


class NoCommonTensors(DomainError):
    pass


class EmptyGroup(DomainError):
    pass


# regime-report
class NoFits(DomainError):
    pass


class TooShortSeries(DomainError):
    pass


class MisalignedReference(DomainError):
    pass


# synth-oracle
class PrecisionLoss(DomainError, ValueError):
    pass


class ManifestError(DomainError, ValueError):
    pass


# cli
class ConfigError(DomainError, ValueError):
    pass
