"""Exception hierarchy shared across the package."""


class AdunitError(Exception):
    """Base class for all adunit errors."""


# --- transport ---

class NameCollision(AdunitError):
    """A topic with this name already exists in the registry."""


class SegmentAllocationFailure(AdunitError):
    """Shared segment could not be created or mapped."""


class LoansExhausted(AdunitError):
    """Publisher already holds the maximum number of outstanding loans."""


class PoolExhausted(AdunitError):
    """No free chunk available in the segment pool."""


class StaleHandle(AdunitError):
    """The loan handle was already published or returned."""


class TooManySubscribers(AdunitError):
    """The per-topic subscription limit is reached."""


class Disconnected(AdunitError):
    """Peer went away on the copy (socket) transport."""


class MessageTooLarge(AdunitError):
    """Payload exceeds the topic's fixed message size."""


class TransportFailure(AdunitError):
    """Generic transport-level failure in the pipeline."""


# --- perception ---

class DimensionMismatch(AdunitError):
    """Paired images have different dimensions."""


class MissingCalibration(AdunitError):
    """Camera calibration is absent or invalid."""


class FrameMismatch(AdunitError):
    """Point cloud is in the wrong coordinate frame for this operation."""


class SingularSystem(AdunitError):
    """Normal-equation system is singular (not enough distinct abscissae)."""


class SingularHomography(AdunitError):
    """Homography is not invertible."""


class InsufficientPixels(AdunitError):
    """Too few lane pixels to fit a polynomial."""


class NoLanePixels(AdunitError):
    """Mask contains neither white nor yellow pixels."""


# --- harness ---

class InvalidSpec(AdunitError):
    """Scene or pipeline specification fails validation."""


class SpawnFailure(AdunitError):
    """A pipeline stage process could not be started."""
