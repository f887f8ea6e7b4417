"""Exception types shared across the toolkit."""


class MultisslError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MultisslError):
    """Operands have incompatible shapes."""


class ContractError(MultisslError):
    """A documented operation precondition was violated."""


class ConfigError(MultisslError):
    """A configuration value is out of range or inconsistent."""


class DataError(MultisslError):
    """Problem with a manifest, sample record, or feature file."""


class MissingFileError(DataError):
    """A referenced feature file does not exist."""


class SchemaError(DataError):
    """A manifest or record does not match the documented schema."""


class DimMismatchError(DataError):
    """A feature file's dimensions disagree with the manifest."""


class SplitOverlapError(DataError):
    """The same sample id appears in more than one split."""


class OptimizerError(MultisslError):
    """Optimizer cannot proceed (e.g. non-finite gradient)."""


class CheckpointError(MultisslError):
    """Checkpoint file is unreadable, corrupt, or the wrong version."""


class TrainingError(MultisslError):
    """The training loop hit an unrecoverable state."""
