"""Exception hierarchy shared across the toolkit."""


class BikeCountError(Exception):
    """Base class for all toolkit errors."""


class EmptyInputError(BikeCountError, ValueError):
    pass


class InputOrderError(BikeCountError, ValueError):
    """Stream timestamps are not strictly increasing."""


class CoverageError(BikeCountError, ValueError):
    """Requested grid starts before the first observation."""


class ConfigurationError(BikeCountError, ValueError):
    pass


class MissingWeatherError(BikeCountError, KeyError):
    """No weather record exists for a (date, zip) key."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EncodingError(BikeCountError, ValueError):
    """A categorical cell holds a level the schema does not declare."""

    def __init__(self, feature, value):
        super().__init__(f"unknown level {value!r} for feature {feature!r}")
        self.feature = feature
        self.value = value


class DomainError(BikeCountError, ValueError):
    """Distribution parameter outside its domain."""


class RankDeficiencyError(BikeCountError, ArithmeticError):
    """Weighted normal equations singular even after ridge regularization."""


class AlignmentError(BikeCountError, ValueError):
    """Feature vector does not line up with the model columns."""


class InferenceUnavailableError(BikeCountError, ArithmeticError):
    pass


class ForestSizeError(BikeCountError, ValueError):
    pass


class OOBUndefinedError(BikeCountError, ArithmeticError):
    """No row was out-of-bag for any tree."""


class SelectionError(BikeCountError, RuntimeError):
    pass


class SpecError(BikeCountError, ValueError):
    """Synthetic-data specification cannot be realized."""


class EquidispersionWarning(UserWarning):
    """NB dispersion reached its upper cap; the fit is effectively Poisson."""
