"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A computation cannot proceed for numerical reasons (bad conditioning,
    divergence, rank deficiency)."""


class RetractionError(NumericalError):
    """A retraction target is rank deficient, so the map is undefined there."""
