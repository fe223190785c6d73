"""Exception hierarchy shared by every pipeline stage.

Each concrete error belongs to one of two families so the CLI can map it to a
stable exit code: :class:`FormatError` (unreadable or malformed input, exit 3)
and :class:`NumericError` (a numeric precondition was violated, exit 4).
"""

from __future__ import annotations


class StrataError(Exception):
    exit_code = 1


class FormatError(StrataError, ValueError):
    exit_code = 3


class NumericError(StrataError, ValueError):
    exit_code = 4


# -- cube_io -----------------------------------------------------------------


class MissingField(FormatError):
    def __init__(self, key: str):
        super().__init__(f"missing header field {key!r}")
        self.key = key


class InvalidValue(FormatError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"invalid value for {key!r}: {reason}")
        self.key = key
        self.reason = reason


class NonIncreasingWavelengths(FormatError):
    def __init__(self, index: int):
        super().__init__(f"wavelengths not strictly increasing at index {index}")
        self.index = index


class PayloadSizeMismatch(FormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"payload holds {actual} bytes, header requires {expected}")
        self.expected = expected
        self.actual = actual


class BandOutOfRange(NumericError):
    def __init__(self, band: int, bands: int):
        super().__init__(f"band {band} outside [0, {bands})")
        self.band = band
        self.bands = bands


class InvalidCube(NumericError):
    pass


# -- preprocess --------------------------------------------------------------


class ZeroBandMean(NumericError):
    def __init__(self, band: int):
        super().__init__(f"white reference band {band} has non-positive mean")
        self.band = band


class BandCountMismatch(NumericError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"expected {expected} bands, got {actual}")
        self.expected = expected
        self.actual = actual


class TrimExceedsBands(NumericError):
    def __init__(self, leading: int, trailing: int, bands: int):
        super().__init__(f"cannot trim {leading}+{trailing} bands from a {bands}-band cube")


class IndivisibleBands(NumericError):
    def __init__(self, bands: int, size: int):
        super().__init__(f"{bands} bands not divisible by bin size {size}")
        self.bands = bands
        self.size = size


# -- dimred ------------------------------------------------------------------


class DegenerateInput(NumericError):
    pass


class ComponentCountMismatch(NumericError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"model has {expected} components, scores have {actual}")


# -- cluster -----------------------------------------------------------------


class TooManyClusters(NumericError):
    def __init__(self, k: int, distinct: int):
        super().__init__(f"K={k} exceeds the {distinct} distinct score vectors")
        self.k = k
        self.distinct = distinct


class TooFewPoints(NumericError):
    def __init__(self, n: int, k: int):
        super().__init__(f"{n} points cannot support {k} mixture components")


class SingularCovariance(NumericError):
    def __init__(self, component: int):
        super().__init__(f"covariance of component {component} is not positive definite")
        self.component = component


class DimensionMismatch(NumericError):
    pass


class InvalidClusterId(NumericError):
    def __init__(self, cluster: int, k: int):
        super().__init__(f"cluster id {cluster} outside [0, {k})")


class EmptyClusterResolved(UserWarning):
    """A K-means cluster went empty and was reseeded with the farthest point."""


class UnknownKeyWarning(UserWarning):
    """A header or config key was not recognized and has been ignored."""


# -- evaluate ----------------------------------------------------------------


class TooFewScans(NumericError):
    pass


class DegenerateImage(NumericError):
    pass


# -- phantom -----------------------------------------------------------------


class UnknownMaterial(NumericError):
    def __init__(self, name: str):
        super().__init__(f"unknown material {name!r}")
        self.name = name


class UnknownDilution(NumericError):
    def __init__(self, dilution: float):
        super().__init__(f"ink dilution {dilution} outside (0, 1]")


class GeometryOutOfBounds(NumericError):
    pass
