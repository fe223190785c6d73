"""Piecewise-linear spectra of the synthetic drawing media.

Every curve here is a design constant shaped by qualitative behaviour, not a
measurement:

* paper: bright and nearly flat, with a mild falloff toward blue.
* red chalk: iron-oxide absorption edge near 580 nm; dark below it, close to
  paper in the near infrared.
* graphite, black chalk, charcoal: flat and dark.
* white chalk: brighter than paper, flat.
* iron-gall ink: a transmittance (wet medium) that rises toward the infrared.
  Dilution ``d`` scales its optical density, ``T_d = T_pure ** d``.

Control points span 400-1000 nm and are linearly interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidValue, UnknownDilution, UnknownMaterial

__all__ = [
    "WAVELENGTH_RANGE",
    "MaterialSpectrum",
    "builtin_materials",
    "iron_gall_ink",
    "resolve_material",
    "band_centers",
]

WAVELENGTH_RANGE = (400.0, 1000.0)


@dataclass(frozen=True)
class MaterialSpectrum:
    """Reflectance (dry media) or transmittance (wet media) control points."""

    name: str
    wavelengths: tuple[float, ...]
    values: tuple[float, ...]
    opacity: float = 1.0
    wet: bool = False

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, float)
        v = np.asarray(self.values, float)
        if wl.shape != v.shape or wl.size < 2:
            raise InvalidValue(self.name, "need matching control points (at least 2)")
        if (np.diff(wl) <= 0).any():
            raise InvalidValue(self.name, "control wavelengths must increase")
        if wl[0] > WAVELENGTH_RANGE[0] or wl[-1] < WAVELENGTH_RANGE[1]:
            raise InvalidValue(self.name, "control points must span 400-1000 nm")
        if (v < 0).any() or (v > 1).any():
            raise InvalidValue(self.name, "values must lie in [0, 1]")
        if not 0 <= self.opacity <= 1:
            raise InvalidValue(self.name, "opacity must lie in [0, 1]")

    def __call__(self, wavelengths) -> np.ndarray:
        return np.interp(np.asarray(wavelengths, float), self.wavelengths, self.values)


_PAPER = MaterialSpectrum(
    "paper",
    (400, 450, 500, 600, 800, 1000),
    (0.78, 0.84, 0.87, 0.89, 0.90, 0.90),
)

_RED_CHALK = MaterialSpectrum(
    "red_chalk",
    (400, 500, 560, 580, 620, 680, 750, 850, 1000),
    (0.12, 0.13, 0.16, 0.22, 0.45, 0.70, 0.82, 0.87, 0.88),
)

_GRAPHITE = MaterialSpectrum("graphite", (400, 1000), (0.25, 0.25))

_BLACK_CHALK = MaterialSpectrum("black_chalk", (400, 700, 1000), (0.07, 0.08, 0.11))

_WHITE_CHALK = MaterialSpectrum("white_chalk", (400, 450, 1000), (0.88, 0.93, 0.94))

_CHARCOAL = MaterialSpectrum("charcoal", (400, 1000), (0.05, 0.06))

# transmittance of undiluted ink
_INK_PURE = (
    (400, 500, 600, 650, 700, 800, 900, 1000),
    (0.03, 0.03, 0.04, 0.06, 0.10, 0.25, 0.45, 0.60),
)


def iron_gall_ink(dilution: float = 1.0) -> MaterialSpectrum:
    """Iron-gall ink transmittance at ``dilution`` in (0, 1]; 1 is undiluted."""
    if not 0 < dilution <= 1:
        raise UnknownDilution(dilution)
    wl, t = _INK_PURE
    values = tuple(float(v) ** dilution for v in t)
    return MaterialSpectrum("iron_gall_ink", wl, values, wet=True)


def builtin_materials() -> dict[str, MaterialSpectrum]:
    mats = [_PAPER, _RED_CHALK, _GRAPHITE, _BLACK_CHALK, _WHITE_CHALK, _CHARCOAL,
            iron_gall_ink(1.0)]
    return {m.name: m for m in mats}


def resolve_material(name: str, dilution: float | None = None) -> MaterialSpectrum:
    if name == "iron_gall_ink":
        return iron_gall_ink(1.0 if dilution is None else dilution)
    mats = builtin_materials()
    if name not in mats:
        raise UnknownMaterial(name)
    if dilution is not None:
        raise InvalidValue("dilution", f"{name} is not a wet medium")
    return mats[name]


def band_centers(bands: int, lo: float = WAVELENGTH_RANGE[0],
                 hi: float = WAVELENGTH_RANGE[1]) -> np.ndarray:
    """Centers of ``bands`` equal-width bands tiling ``[lo, hi]``."""
    step = (hi - lo) / bands
    return lo + step * (np.arange(bands) + 0.5)
