"""Exception types shared across the package."""


class PillarFuseError(Exception):
    """Base class for all package-specific errors."""


class FrameMismatch(PillarFuseError):
    """A point cloud is tagged with a different frame than the operation expects."""


class OutOfWindow(PillarFuseError):
    """A point lies outside the voxelization window (caller contract violation)."""


class ShapeMismatch(PillarFuseError):
    """Tensor or grid shapes are incompatible."""


class WindowMismatch(PillarFuseError):
    """Feature grids cover different spatial windows and cannot be fused."""


class IndexOutOfRange(PillarFuseError):
    """A pillar cell index falls outside the target grid."""


class DuplicateCell(PillarFuseError):
    """Two pillars claim the same grid cell during scatter."""


class DegenerateBatch(PillarFuseError):
    """Batch statistics cannot be estimated (constant or near-empty batch)."""


class DegenerateBox(PillarFuseError):
    """A box with zero footprint area was passed to an IoU computation."""


class GraphConsumed(PillarFuseError):
    """backward() was called twice on the same computation graph."""


class NonFiniteDelta(PillarFuseError):
    """Box regression deltas contain NaN or Inf."""


class TruncatedFile(PillarFuseError):
    """A binary point-cloud file has a byte count that is not a whole number of records."""


class ParseError(PillarFuseError):
    """A text file failed to parse; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(PillarFuseError):
    """Run configuration is invalid (unknown key, bad value, missing section)."""


class DataError(PillarFuseError):
    """Dataset on disk is missing, inconsistent, or unreadable."""


class DivergenceError(PillarFuseError):
    """Training produced a non-finite loss."""
