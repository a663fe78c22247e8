"""Exception types shared across the toolkit.

Each class maps to one failure family so the CLI can translate them into
stable exit codes (see cli.py).
"""


class PrmcsError(Exception):
    """Base class for all toolkit errors."""


class InvalidRecord(PrmcsError):
    """A caption record violates its invariants (bad critical object, duplicate id, bad JSON line)."""


class DimensionMismatch(PrmcsError):
    """Two vectors or matrices that must share a dimension do not."""


class ShapeMismatch(PrmcsError):
    """Parameter/gradient/optimizer-state shapes disagree."""


class BadMagic(PrmcsError):
    """Binary file does not start with the expected magic bytes."""


class VersionMismatch(PrmcsError):
    """Binary file has an unsupported format version."""


class TruncatedFile(PrmcsError):
    """Binary file payload is shorter than its header promises."""


class ManifestMismatch(PrmcsError):
    """Embedding matrix and its row manifest disagree, or an id cannot be aligned."""


class UnknownImageId(PrmcsError):
    """A record references an image id absent from the matrix manifest."""


class MissingOriginal(PrmcsError):
    """A perturbed score row has no original row with the same id."""


class ZeroOriginalMean(PrmcsError):
    """Percentage change is undefined because the original mean score is zero."""


class DegenerateInput(PrmcsError):
    """Correlation statistics received a constant or too-short list."""


class DatasetTooSmall(PrmcsError):
    """Not enough records for the requested split."""
