"""Exception taxonomy shared across the package."""


class IconError(Exception):
    """Base class for all package errors."""


class ContractError(IconError):
    """A caller violated a documented precondition (shapes, ranges, missing data)."""


class NumericDomainError(IconError):
    """A computation produced or received non-finite values."""


class InstabilityError(IconError):
    """A flow evaluation left the numerically safe regime."""


class UnsupportedOpError(IconError):
    """A loss graph used a primitive the tape does not register."""


class CorrelationUndefinedError(IconError):
    """Pearson correlation requested for a zero-variance input."""


class GenerationError(IconError):
    """Synthetic data generation could not satisfy its constraints."""


class IngestionError(IconError):
    """A dataset file failed validation on load."""


class DivergenceError(IconError):
    """Training produced non-finite losses or gradients."""
