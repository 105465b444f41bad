"""Exception types shared across the toolkit."""


class VitfieldError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(VitfieldError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class LabelError(VitfieldError, ValueError):
    """A class label or label index is outside the allowed set."""


class ConfigError(VitfieldError, ValueError):
    """A configuration value violates its invariants."""


class ContractError(VitfieldError, ValueError):
    """An operation was called outside its documented contract."""


class DatasetLayoutError(VitfieldError, ValueError):
    """Dataset directory does not match the expected class-per-folder layout."""


class AnnotationParseError(VitfieldError, ValueError):
    """A bounding-box annotation file could not be parsed."""

    def __init__(self, message: str, byte_offset: int | None = None):
        super().__init__(message)
        self.byte_offset = byte_offset


class StratificationError(VitfieldError, ValueError):
    """A dataset cannot be split into the requested number of folds."""


class TrainingDiverged(VitfieldError, RuntimeError):
    """Training produced NaN loss or gradients."""
