"""White-reference channel normalization, band trimming and spectral binning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import parallel
from .cube_io import SpectralCube
from .errors import (
    BandCountMismatch,
    IndivisibleBands,
    InvalidValue,
    TrimExceedsBands,
    ZeroBandMean,
)

__all__ = [
    "NormalizationFactors",
    "ORDERS",
    "compute_white_factors",
    "apply_normalization",
    "trim_bands",
    "bin_bands",
    "band_means",
    "preprocess",
]

ORDERS = ("trim-bin-norm", "norm-trim-bin")


@dataclass(frozen=True, eq=False)
class NormalizationFactors:
    """One multiplicative factor per band plus the response level they target."""

    factors: np.ndarray
    target: float

    def __post_init__(self):
        f = np.array(self.factors, dtype=np.float64)
        if f.ndim != 1 or not np.isfinite(f).all() or (f <= 0).any():
            raise InvalidValue("factors", "must be a 1-D sequence of finite positive reals")
        if not (np.isfinite(self.target) and self.target > 0):
            raise InvalidValue("target", f"{self.target} must be a finite positive real")
        f.flags.writeable = False
        object.__setattr__(self, "factors", f)

    def __len__(self):
        return len(self.factors)


def band_means(cube: SpectralCube) -> np.ndarray:
    """Spatial mean of every band plane (float64)."""
    flat = cube.values.reshape(cube.bands, -1)
    parts = parallel.map_ordered(
        lambda s: flat[s].mean(axis=1, dtype=np.float64),
        parallel.chunks(cube.bands, parallel.BAND_CHUNK))
    return np.concatenate(parts)


def compute_white_factors(white: SpectralCube,
                          target: Union[str, float] = "mean") -> NormalizationFactors:
    """Per-band factors that flatten the white capture to a common level.

    ``factor[b] = target / mean(white[b])``. With ``target="mean"`` the level is
    the average of the band means, so the overall signal scale is preserved.
    """
    means = band_means(white)
    bad = np.flatnonzero(~(means > 0))
    if bad.size:
        raise ZeroBandMean(int(bad[0]))
    if isinstance(target, str):
        if target not in ("mean", "mean_of_means"):
            raise InvalidValue("target", f"expected 'mean' or a number, got {target!r}")
        level = float(np.sum(means) / means.size)
    else:
        level = float(target)
    return NormalizationFactors(level / means, level)


def apply_normalization(cube: SpectralCube, f: NormalizationFactors) -> SpectralCube:
    if len(f) != cube.bands:
        raise BandCountMismatch(len(f), cube.bands)
    out = np.empty(cube.values.shape, np.float64)

    def work(s: slice):
        np.multiply(cube.values[s], f.factors[s, None, None], out=out[s], dtype=np.float64)

    parallel.map_ordered(work, parallel.chunks(cube.bands, parallel.BAND_CHUNK))
    return cube.with_values(out)


def trim_bands(cube: SpectralCube, leading: int, trailing: int) -> SpectralCube:
    """Drop ``leading`` bands from the start and ``trailing`` from the end."""
    if leading < 0 or trailing < 0:
        raise InvalidValue("trim", "counts must be nonnegative")
    if leading + trailing >= cube.bands:
        raise TrimExceedsBands(leading, trailing, cube.bands)
    if leading == 0 and trailing == 0:
        return cube
    stop = cube.bands - trailing
    wl = cube.wavelengths
    return cube.with_values(cube.values[leading:stop],
                            None if wl is None else wl[leading:stop])


def bin_bands(cube: SpectralCube, size: int, drop_tail: bool = False) -> SpectralCube:
    """Average each run of ``size`` adjacent bands into one band.

    A band count not divisible by ``size`` raises :class:`IndivisibleBands`
    unless ``drop_tail`` discards the incomplete final group.
    """
    if size < 1:
        raise InvalidValue("bin", f"bin size {size} must be >= 1")
    n_out, rest = divmod(cube.bands, size)
    if rest and not drop_tail:
        raise IndivisibleBands(cube.bands, size)
    if n_out == 0:
        raise IndivisibleBands(cube.bands, size)
    if size == 1 and not rest:
        return cube

    grouped = cube.values[:n_out * size].reshape(n_out, size, cube.height, cube.width)
    out = np.empty((n_out, cube.height, cube.width), np.float64)

    def work(s: slice):
        acc = grouped[s, 0].astype(np.float64)
        for j in range(1, size):
            acc += grouped[s, j]
        out[s] = acc / size

    parallel.map_ordered(work, parallel.chunks(n_out, parallel.BAND_CHUNK))
    wl = cube.wavelengths
    if wl is not None:
        wl = wl[:n_out * size].reshape(n_out, size).mean(axis=1)
    return cube.with_values(out, wl)


def preprocess(cube: SpectralCube, white: SpectralCube | None, *,
               trim: tuple[int, int] = (4, 4), size: int = 4,
               order: str = "trim-bin-norm", target: Union[str, float] = "mean",
               drop_tail: bool = False) -> tuple[SpectralCube, NormalizationFactors | None]:
    """Run trimming, binning and (if ``white`` is given) normalization in ``order``.

    The white capture goes through the same spectral reduction as the cube
    before its factors are fitted, so factors always match the cube's bands.
    """
    if order not in ORDERS:
        raise InvalidValue("order", f"expected one of {ORDERS}, got {order!r}")
    if white is not None and white.bands != cube.bands:
        raise BandCountMismatch(cube.bands, white.bands)

    def reduce(c: SpectralCube) -> SpectralCube:
        return bin_bands(trim_bands(c, *trim), size, drop_tail)

    factors = None
    if order == "norm-trim-bin":
        if white is not None:
            factors = compute_white_factors(white, target)
            cube = apply_normalization(cube, factors)
        return reduce(cube), factors

    cube = reduce(cube)
    if white is not None:
        factors = compute_white_factors(reduce(white), target)
        cube = apply_normalization(cube, factors)
    return cube, factors
