"""Exception types shared across the toolkit.

Every error raised by the pipeline derives from ``SlamFrontKitError`` so
callers (notably the CLI) can map failures onto exit codes without
enumerating modules.
"""


class SlamFrontKitError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveDepthError(SlamFrontKitError):
    """A 3D point with z <= 0 reached a projection/backprojection."""


class ImageTooSmallError(SlamFrontKitError):
    """Image below the minimum size an operation supports."""


class SizeMismatchError(SlamFrontKitError):
    """Two image-shaped inputs disagree on dimensions."""


class DimensionMismatchError(SlamFrontKitError):
    """Descriptor/weight dimensions are inconsistent."""


class BadMagicError(SlamFrontKitError):
    """Binary file does not start with the expected magic bytes."""


class VersionMismatchError(SlamFrontKitError):
    """Binary file has an unsupported format version."""


class FrameOutOfRangeError(SlamFrontKitError):
    """Requested frame index is not present in a feature file."""


class TruncatedFileError(SlamFrontKitError):
    """Binary file ended before a full record could be read."""


class DetectionError(SlamFrontKitError):
    """A keypoint detector failed or misbehaved on a pyramid level."""

    def __init__(self, message, level):
        super().__init__(message)
        self.level = level


class InsufficientCorrespondencesError(SlamFrontKitError):
    """Pose refinement needs at least 4 correspondences."""


class DivergedError(SlamFrontKitError):
    """Pose refinement error increased for too many consecutive steps."""


class TrackingLostError(SlamFrontKitError):
    """Tracking fell below the minimum inlier count.

    Carries the frame index where tracking failed plus whatever partial
    results the tracking loop produced, so callers can still persist them.
    """

    def __init__(self, frame_index, inliers, trajectory=None, diagnostics=None):
        super().__init__(f"tracking lost at frame {frame_index} ({inliers} inliers)")
        self.frame_index = frame_index
        self.inliers = inliers
        self.trajectory = trajectory
        self.diagnostics = diagnostics if diagnostics is not None else []


class NoOverlapError(SlamFrontKitError):
    """Time association between two trajectories produced zero pairs."""


class DegenerateGeometryError(SlamFrontKitError):
    """Point sets too degenerate (coincident/collinear) for alignment."""


class ParseError(SlamFrontKitError):
    """A text file (trajectory, calibration, listing) failed to parse."""


class NonFiniteValueError(SlamFrontKitError):
    """A parsed numeric field was NaN or infinite."""


class LayoutError(SlamFrontKitError):
    """Dataset directory does not match the expected layout."""


class CalibrationError(SlamFrontKitError):
    """Calibration file missing or invalid."""
