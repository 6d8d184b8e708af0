"""Exception types shared across the package.

DataError covers malformed or inconsistent inputs (CLI exit code 2),
NumericalError covers computations that failed on valid inputs (exit code 3).
"""


class MaplocError(Exception):
    pass


class DataError(MaplocError):
    pass


class NumericalError(MaplocError):
    pass


# geometry
class EmptyCloud(DataError):
    pass


# registration
class NoCorrespondences(NumericalError):
    pass


# degeneracy
class NotSymmetric(DataError):
    pass


# factors
class NonMonotonicTimestamps(DataError):
    pass


class WindowTooShort(DataError):
    pass


class ZeroAcceleration(NumericalError):
    pass


# graph
class IndexOutOfRange(DataError):
    pass


class NotAnchored(DataError):
    pass


class SingularSystem(NumericalError):
    def __init__(self, message, state_index=None):
        super().__init__(message)
        self.state_index = state_index


# evaluation
class NoMatches(DataError):
    pass


class DegenerateGeometry(NumericalError):
    pass


class NoInliers(NumericalError):
    pass


# pipeline / io
class ParseError(DataError):
    def __init__(self, message, line=None, offset=None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


class InvalidSpec(DataError):
    pass


class InitializationFailure(NumericalError):
    pass
