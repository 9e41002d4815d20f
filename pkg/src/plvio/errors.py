"""Exception types shared across the estimator."""


class VioError(Exception):
    """Base class for all estimator errors."""


class DimensionMismatch(VioError):
    pass


class WindowFull(VioError):
    pass


class NonMonotonicTime(VioError):
    pass


class BehindCamera(VioError):
    pass


class InsufficientBaseline(VioError):
    pass


class InsufficientViews(VioError):
    pass


class DivergedTriangulation(VioError):
    pass


class NegativeDepth(VioError):
    pass


class RankDeficient(VioError):
    pass


class DegenerateLine(VioError):
    pass


class SingularInnovation(VioError):
    pass


class AllGated(VioError):
    pass


class TooFewMatches(VioError):
    pass


class DuplicateFrameId(VioError):
    pass


class ParseError(VioError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        super().__init__(where + message)


class DanglingTrackId(VioError):
    pass


class NoOverlap(VioError):
    pass
