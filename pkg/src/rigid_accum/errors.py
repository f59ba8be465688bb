"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`AccumError`,
so callers that want to degrade gracefully can catch a single type.
"""


class AccumError(Exception):
    pass


class DegenerateConfiguration(AccumError):
    """Weighted point set is collinear or coincident; rotation is ambiguous."""


class MissingObjectTransform(AccumError):
    def __init__(self, instance, frame):
        super().__init__(f"no transform for instance {instance} in frame {frame}")
        self.instance = instance
        self.frame = frame


class EmptyGrid(AccumError):
    pass


class ZeroFeature(AccumError):
    pass


class InsufficientBackground(AccumError):
    pass


class MissingCentroid(AccumError):
    def __init__(self, instance):
        super().__init__(f"no target-frame centroid for instance {instance}")
        self.instance = instance


class MissingTargetObservation(AccumError):
    def __init__(self, instance):
        super().__init__(f"instance {instance} is not observed in the target frame")
        self.instance = instance


class EmptyInput(AccumError):
    pass


class ZeroQuaternion(AccumError):
    pass


class NonDifferentiable(AccumError):
    """Raised by gradient checks at kinks (ties in a sort, hinge corners)."""


class EmptyMask(AccumError):
    pass


class NoGtClusters(AccumError):
    pass


class OutOfSpan(AccumError):
    pass


class UncoveredForegroundPoint(AccumError):
    def __init__(self, frame, index):
        super().__init__(f"foreground point {index} of frame {frame} lies in no box")
        self.frame = frame
        self.index = index


class FormatError(AccumError):
    """Base for serialization problems."""


class MalformedHeader(FormatError):
    pass


class TruncatedBody(FormatError):
    pass


class UnsupportedProperty(FormatError):
    """A PLY property that cannot be decoded at all (unknown binary size)."""


class UnsupportedPropertyWarning(UserWarning):
    """A PLY property that was skipped while reading."""


class NonUnitQuaternion(FormatError):
    pass


class GapInFrames(FormatError):
    pass


class SizeMismatch(FormatError):
    pass


class ConfigError(AccumError):
    pass
