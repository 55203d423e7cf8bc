"""Exception hierarchy shared across the toolkit.

Errors fall into three groups that the CLI maps onto exit codes:
degenerate or infeasible inputs (exit 2), file-format problems (exit 2),
and internal invariant violations (exit 3). Plain usage mistakes raise
``ValueError`` and exit 1.
"""


class TinyshotError(Exception):
    """Base class for all toolkit errors."""


# -- degenerate numeric inputs ----------------------------------------------

class AllZeroVector(TinyshotError):
    """Vector has max-abs 0 and cannot be scaled into the integer range."""


class ZeroNorm(TinyshotError):
    """Vector norm below epsilon; cosine similarity is undefined."""


class DimensionMismatch(TinyshotError):
    """Vectors that must share a dimension do not."""


class EmptyTemplates(TinyshotError):
    """A prompted class carries no template embeddings."""


class NoFeasibleDimension(TinyshotError):
    """Even the smallest ladder dimension exceeds the byte budget."""


class DimensionTooLarge(TinyshotError):
    """Requested prefix dimension exceeds the stored dimension."""


class BadTemperature(TinyshotError):
    """Contrastive temperature must be strictly positive."""


class NonFiniteLoss(TinyshotError):
    """Training loss became NaN or infinite."""


class EmptyCluster(TinyshotError):
    """k-means produced an empty cluster after all reseeding attempts."""


class DegenerateActivation(TinyshotError):
    """An activation tensor is all-zero across every calibration sample."""


class ShapeMismatch(TinyshotError):
    """Tensor shapes are incompatible with the requested operation."""


class NotCalibrated(TinyshotError):
    """The integer inference path needs calibration statistics first."""


class AccumulatorOverflow(TinyshotError):
    """An int8 dot product overflowed the 32-bit signed accumulator."""


class UnresolvedShapes(TinyshotError):
    """Layer shapes could not be resolved while walking the graph."""


class InfeasibleBase(TinyshotError):
    """The model alone does not fit the platform, so no class budget exists."""


# -- file formats -----------------------------------------------------------

class FormatError(TinyshotError):
    """Base class for container-format failures."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersion(FormatError):
    """Container version is newer than this reader understands."""


class TruncatedFile(FormatError):
    """File ended early or its length disagrees with the header."""


class ChecksumMismatch(FormatError):
    """Trailing CRC32 does not match the file contents."""
