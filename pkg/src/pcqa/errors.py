"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`PcqaError` and carries
an ``exit_code`` that the CLI returns unchanged.
"""


class PcqaError(Exception):
    exit_code = 1


class ParseError(PcqaError):
    exit_code = 4


class UnsupportedFormat(ParseError):
    pass


class DegenerateCloud(PcqaError):
    exit_code = 5


class InsufficientDensity(PcqaError):
    exit_code = 5


class SingularPatch(PcqaError):
    exit_code = 5


class EmptyTensor(PcqaError):
    exit_code = 5


class ShapeError(PcqaError):
    exit_code = 6


class ConfigError(PcqaError):
    exit_code = 6


class ReferenceMismatch(ShapeError):
    pass


class InsufficientData(PcqaError):
    exit_code = 8


class InsufficientBatch(InsufficientData):
    pass


class DegenerateTarget(InsufficientData):
    pass


class ModelError(PcqaError):
    exit_code = 7


class UnsupportedVersion(ModelError):
    pass


class ChecksumError(ModelError):
    pass


class ModelStatsMismatch(ModelError):
    exit_code = 9


class DegenerateVariance(UserWarning):
    """Correlation requested on a (near) constant vector; 0 is returned."""


class NonConverged(UserWarning):
    """Logistic fit stopped at the iteration cap."""


IO_EXIT_CODE = 3
