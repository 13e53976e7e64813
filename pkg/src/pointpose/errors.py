"""Exception types shared across the package."""


class PointPoseError(Exception):
    """Base class for all package-specific errors."""


class EmptyIndexError(PointPoseError):
    """Nearest-neighbor query against an index built from zero points."""


class DegenerateCorrespondencesError(PointPoseError):
    """Too few or rank-deficient point pairs for rigid alignment."""


class NoOverlapError(PointPoseError):
    """ICP never found enough correspondences at any schedule level."""


class EmptyNeighborhoodError(PointPoseError):
    """Spherical extraction found no usable points around the center."""


class InsufficientForegroundError(PointPoseError):
    """Scene has too few foreground points to sample positives from."""


class NoHypothesisError(PointPoseError):
    """Pose voting could not produce a hypothesis."""


class InvalidHypothesisError(PointPoseError):
    """Hypothesis violates its invariants (e.g. non-positive density score)."""


class EmptySceneError(PointPoseError):
    """Detection was asked to run on an empty scene cloud."""


class DatasetFormatError(PointPoseError):
    """Malformed training-example file."""


class WeightsFormatError(PointPoseError):
    """Malformed or mismatched network weights file."""


class ConfigError(PointPoseError):
    """Unknown or invalid configuration key/value."""
