"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 1, data problems with 2, numeric failures with 3.
"""


class FairAugError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FairAugError):
    """Invalid configuration file, parameter, or call contract."""

    exit_code = 1


class ParameterError(ConfigError):
    """A numeric parameter is outside its valid range."""


class ContractError(ConfigError):
    """An API precondition was violated by the caller."""


class DataError(FairAugError):
    """Malformed or unusable input data."""

    exit_code = 2


class SchemaError(DataError):
    """A required column is missing or mislabeled."""


class EmptyCorpusError(DataError):
    """Filtering removed every interaction."""


class DegeneratePartitionError(DataError):
    """A demographic attribute has fewer than two represented values."""


class EmptyCandidatesError(DataError):
    """No candidate edges survive sampling; augmentation cannot start."""


class PolicyUnavailableError(DataError):
    """A sampling policy needs data the graph does not carry."""


class NumericError(FairAugError):
    """A numeric routine failed to converge or produced non-finite values."""

    exit_code = 3


class TrainingError(NumericError):
    """Model training diverged."""


class GradientError(NumericError):
    """Gradient evaluation hit a non-finite intermediate."""


class MetricError(DataError):
    """A metric is undefined on the given inputs (e.g. empty group)."""
