"""Exception types shared across the package."""


class NpShapeError(Exception):
    """Base class for all errors raised by npshape."""


class ValidationError(NpShapeError):
    """An input violated a documented invariant (bad record, shape mismatch, ...)."""


class EmptyMaskError(ValidationError):
    """A mask with no foreground pixels where at least one is required."""


class FileFormatError(NpShapeError):
    """A file on disk does not conform to its documented format."""


class GraphError(NpShapeError):
    """A portable graph file could not be loaded or executed."""


class PlacementError(NpShapeError):
    """Synthetic scene generation could not place a shape without overlap."""


class ConfigError(NpShapeError):
    """A pipeline configuration failed schema validation."""


class StageError(NpShapeError):
    """A pipeline stage failed; message is prefixed with the stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
