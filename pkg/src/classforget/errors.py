"""Exception types shared across the package.

Every error raised by this package derives from ClassForgetError so callers
can catch the whole family; the CLI maps subtypes to distinct exit codes.
"""


class ClassForgetError(Exception):
    """Base class for all package errors."""


class InputShapeError(ClassForgetError):
    """A batch does not match the model's expected input shape."""


class InvalidClassError(ClassForgetError):
    """A class id falls outside the model's label set."""


class MaskError(ClassForgetError):
    """A relevance mask does not match the model's tensor names/shapes."""


class CheckpointFormatError(ClassForgetError):
    """A checkpoint file is corrupt or incompatible with the requested model."""


class InsufficientDataError(ClassForgetError):
    """A dataset slice is empty or smaller than the requested selection."""


class AugmentationConflictError(ClassForgetError):
    """The requested augmentation was already used when training the model."""


class InvalidPartitionError(ClassForgetError):
    """A class partition violates its invariants (e.g. no remaining classes)."""


class EmptyBatchError(ClassForgetError):
    """A loss was requested for a batch with no examples."""


class ConfigError(ClassForgetError):
    """A run-config file is malformed or contains unknown keys."""


class BaselineSpecError(ClassForgetError):
    """A baseline specification is inconsistent or unknown."""


class ComparisonError(ClassForgetError):
    """Reports from incompatible runs were mixed in one comparison."""
