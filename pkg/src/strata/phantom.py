"""Synthetic layered drawings with exact ground truth.

A phantom is a stack of layers composited over paper in drawing order. Dry
media are alpha-composited with their reflectance, wet media multiply the
underlying reflectance by their transmittance. The result is lit by an
illumination field, optionally shaped by a sensor response, and receives
seeded Gaussian noise.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import __version__, parallel
from .cube_io import GrayImage, SpectralCube, save_cube, save_gray
from .errors import FormatError, GeometryOutOfBounds, InvalidValue
from .evaluate import LayerGroundTruth
from .materials import WAVELENGTH_RANGE, band_centers, resolve_material

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "Line",
    "Polygon",
    "Layer",
    "Illumination",
    "PhantomSpec",
    "Phantom",
    "rasterize",
    "generate_phantom",
    "parse_spec",
    "load_spec",
    "format_spec",
    "write_phantom",
    "PRESETS",
    "textured_image",
]

WHITE_REFLECTANCE = 0.95
SCAN_WAVELENGTHS = np.arange(400.0, 701.0, 5.0)

Point = tuple[float, float]


@dataclass(frozen=True)
class Line:
    """Polyline stroke; pixels whose centers lie within ``width / 2`` are covered."""

    points: tuple[Point, ...]
    width: float

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))
        if len(self.points) < 2 or self.width <= 0:
            raise InvalidValue("line", "needs >= 2 points and a positive width")


@dataclass(frozen=True)
class Polygon:
    """Filled wash area (even-odd rule on pixel centers)."""

    points: tuple[Point, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))
        if len(self.points) < 3:
            raise InvalidValue("polygon", "needs >= 3 points")


Shape = Union[Line, Polygon]


@dataclass(frozen=True)
class Layer:
    name: str
    material: str
    shapes: tuple[Shape, ...]
    dilution: float | None = None


@dataclass(frozen=True)
class Illumination:
    """``uniform`` or ``linear_gradient``: ``1 + amplitude * (2t - 1)`` along ``axis``."""

    kind: str = "uniform"
    axis: str = "x"
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "linear_gradient"):
            raise InvalidValue("illumination", f"unknown kind {self.kind!r}")
        if self.axis not in ("x", "y"):
            raise InvalidValue("illumination.axis", f"expected 'x' or 'y', got {self.axis!r}")
        if not 0 <= self.amplitude <= 0.5:
            raise InvalidValue("illumination.amplitude", f"{self.amplitude} outside [0, 0.5]")

    def field(self, height: int, width: int) -> np.ndarray:
        if self.kind == "uniform" or self.amplitude == 0:
            return np.ones((height, width))
        if self.axis == "x":
            t = (np.arange(width) + 0.5) / width
            return np.broadcast_to(1 + self.amplitude * (2 * t - 1), (height, width)).copy()
        t = (np.arange(height) + 0.5) / height
        return np.broadcast_to((1 + self.amplitude * (2 * t - 1))[:, None], (height, width)).copy()


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 256
    height: int = 256
    bands: int = 1040
    layers: tuple[Layer, ...] = ()
    illumination: Illumination = field(default_factory=Illumination)
    noise_sigma: float = 0.01
    seed: int = 0
    wavelength_range: tuple[float, float] = WAVELENGTH_RANGE
    sensor: str = "flat"

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.bands < 1:
            raise InvalidValue("dimensions", "width, height and bands must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidValue("noise_sigma", "must be nonnegative")
        if self.sensor not in ("flat", "cmos"):
            raise InvalidValue("sensor", f"expected 'flat' or 'cmos', got {self.sensor!r}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise InvalidValue("layers", "layer names must be unique")


@dataclass(frozen=True, eq=False)
class Phantom:
    cube: SpectralCube
    white: SpectralCube
    truth: LayerGroundTruth
    step_scans: tuple[GrayImage, ...]
    spec: PhantomSpec


# -- geometry ----------------------------------------------------------------


def _check_bounds(shape: Shape, width: int, height: int) -> None:
    for x, y in shape.points:
        if not (0 <= x <= width and 0 <= y <= height):
            raise GeometryOutOfBounds(f"point ({x}, {y}) outside {width}x{height}")


def _segment_distance2(px, py, a: Point, b: Point) -> np.ndarray:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    length2 = dx * dx + dy * dy
    if length2 == 0:
        return (px - ax) ** 2 + (py - ay) ** 2
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
    return (px - ax - t * dx) ** 2 + (py - ay - t * dy) ** 2


def rasterize(shape: Shape, width: int, height: int) -> np.ndarray:
    """Boolean coverage of ``shape`` sampled at pixel centers."""
    py, px = np.mgrid[0:height, 0:width] + 0.5
    if isinstance(shape, Line):
        r2 = (shape.width / 2) ** 2
        mask = np.zeros((height, width), bool)
        for a, b in zip(shape.points[:-1], shape.points[1:]):
            mask |= _segment_distance2(px, py, a, b) <= r2
        return mask
    inside = np.zeros((height, width), bool)
    pts = shape.points
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        if y0 == y1:
            continue
        crosses = (py >= min(y0, y1)) & (py < max(y0, y1))
        xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xi)
    return inside


# -- synthesis ---------------------------------------------------------------


def _sensor_response(kind: str, wl: np.ndarray) -> np.ndarray:
    if kind == "flat":
        return np.ones_like(wl)
    # silicon-like response: peak near 600 nm, weak at both ends
    return np.interp(wl, (400, 500, 600, 750, 900, 1000), (0.35, 0.75, 1.0, 0.8, 0.45, 0.25))


def _composite(wl: np.ndarray, layers, masks, height: int, width: int) -> np.ndarray:
    """Noise-free reflectance ``(len(wl), height, width)`` after all ``layers``."""
    paper = resolve_material("paper")(wl)
    out = np.broadcast_to(paper[:, None, None], (wl.size, height, width)).copy()
    for layer, mask in zip(layers, masks):
        mat = resolve_material(layer.material, layer.dilution)
        spec = mat(wl)[:, None]
        sub = out[:, mask]
        if mat.wet:
            out[:, mask] = sub * spec
        else:
            out[:, mask] = (1 - mat.opacity) * sub + mat.opacity * spec
    return out


def _band_noise(seed: int, stream: int, band: int, shape, sigma: float) -> np.ndarray:
    rng = np.random.default_rng([seed, stream, band])
    return rng.normal(0.0, sigma, shape)


def _scan(layers, masks, height: int, width: int) -> GrayImage:
    refl = _composite(SCAN_WAVELENGTHS, layers, masks, height, width).mean(axis=0)
    return GrayImage(np.clip(np.floor(refl * 255 + 0.5), 0, 255).astype(np.uint8))


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Render cube, white reference, layer masks and per-step scans for ``spec``.

    Step scans are noise-free, uniformly lit luminance renderings (mean visible
    reflectance, 400-700 nm) of blank paper and of the drawing after each layer.
    """
    h, w = spec.height, spec.width
    for layer in spec.layers:
        resolve_material(layer.material, layer.dilution)
        for shape in layer.shapes:
            _check_bounds(shape, w, h)
    masks = []
    for layer in spec.layers:
        m = np.zeros((h, w), bool)
        for shape in layer.shapes:
            m |= rasterize(shape, w, h)
        masks.append(m)

    wl = band_centers(spec.bands, *spec.wavelength_range)
    light = spec.illumination.field(h, w)
    sensor = _sensor_response(spec.sensor, wl)
    cube = np.empty((spec.bands, h, w), np.float32)
    white = np.empty((spec.bands, h, w), np.float32)

    def render(s: slice):
        refl = _composite(wl[s], spec.layers, masks, h, w)
        gain = sensor[s, None, None] * light
        sig = refl * gain
        flat = WHITE_REFLECTANCE * gain
        if spec.noise_sigma > 0:
            for i, b in enumerate(range(s.start, s.stop)):
                sig[i] += _band_noise(spec.seed, 0, b, (h, w), spec.noise_sigma)
                flat[i] += _band_noise(spec.seed, 1, b, (h, w), spec.noise_sigma)
        cube[s] = np.maximum(sig, 0.0)
        white[s] = np.maximum(flat, 0.0)

    parallel.map_ordered(render, parallel.chunks(spec.bands, parallel.BAND_CHUNK))

    scans = [_scan(spec.layers[:i], masks[:i], h, w) for i in range(len(spec.layers) + 1)]
    names = tuple(layer.name for layer in spec.layers)
    truth = LayerGroundTruth(names, np.stack(masks) if masks else np.zeros((0, h, w), bool))
    return Phantom(
        cube=SpectralCube.from_array(cube, wl),
        white=SpectralCube.from_array(white, wl),
        truth=truth,
        step_scans=tuple(scans),
        spec=spec,
    )


# -- spec files --------------------------------------------------------------


def _shape_from(entry: dict) -> Shape:
    kind = entry.get("kind", "line")
    pts = entry.get("points")
    if not isinstance(pts, list) or not all(isinstance(p, list) and len(p) == 2 for p in pts):
        raise FormatError("shape 'points' must be a list of [x, y] pairs")
    if kind == "line":
        return Line(tuple(tuple(p) for p in pts), float(entry.get("width", 3)))
    if kind == "polygon":
        return Polygon(tuple(tuple(p) for p in pts))
    raise FormatError(f"unknown shape kind {kind!r}")


def parse_spec(text: str) -> PhantomSpec:
    """Build a spec from TOML text.

    Top-level keys mirror :class:`PhantomSpec`; ``[illumination]`` holds
    ``kind``/``axis``/``amplitude``; each ``[[layers]]`` entry has ``name``,
    ``material``, optional ``dilution`` and ``[[layers.shapes]]`` entries with
    ``kind`` (``line`` or ``polygon``), ``points`` and, for lines, ``width``.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"phantom spec: {exc}") from None
    try:
        layers = tuple(
            Layer(
                name=str(entry.get("name", entry["material"])),
                material=str(entry["material"]),
                shapes=tuple(_shape_from(s) for s in entry.get("shapes", [])),
                dilution=entry.get("dilution"),
            )
            for entry in doc.get("layers", [])
        )
        illum = Illumination(**doc.get("illumination", {}))
        wr = doc.get("wavelength_range", list(WAVELENGTH_RANGE))
        return PhantomSpec(
            width=int(doc.get("width", 256)),
            height=int(doc.get("height", 256)),
            bands=int(doc.get("bands", 1040)),
            layers=layers,
            illumination=illum,
            noise_sigma=float(doc.get("noise_sigma", 0.01)),
            seed=int(doc.get("seed", 0)),
            wavelength_range=(float(wr[0]), float(wr[1])),
            sensor=str(doc.get("sensor", "flat")),
        )
    except KeyError as exc:
        raise FormatError(f"phantom spec: missing key {exc.args[0]!r}") from None
    except TypeError as exc:
        raise FormatError(f"phantom spec: {exc}") from None


def load_spec(path: Union[str, Path]) -> PhantomSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


def _toml_points(points) -> str:
    return "[" + ", ".join(f"[{x!r}, {y!r}]" for x, y in points) + "]"


def format_spec(spec: PhantomSpec) -> str:
    """TOML text that :func:`parse_spec` reads back to an equal spec."""
    out = [
        f"width = {spec.width}",
        f"height = {spec.height}",
        f"bands = {spec.bands}",
        f"noise_sigma = {spec.noise_sigma!r}",
        f"seed = {spec.seed}",
        f"wavelength_range = [{spec.wavelength_range[0]!r}, {spec.wavelength_range[1]!r}]",
        f'sensor = "{spec.sensor}"',
        "",
        "[illumination]",
        f'kind = "{spec.illumination.kind}"',
        f'axis = "{spec.illumination.axis}"',
        f"amplitude = {spec.illumination.amplitude!r}",
    ]
    for layer in spec.layers:
        out += ["", "[[layers]]", f'name = "{layer.name}"', f'material = "{layer.material}"']
        if layer.dilution is not None:
            out.append(f"dilution = {layer.dilution!r}")
        for shape in layer.shapes:
            out.append("[[layers.shapes]]")
            if isinstance(shape, Line):
                out += ['kind = "line"', f"width = {shape.width!r}"]
            else:
                out.append('kind = "polygon"')
            out.append(f"points = {_toml_points(shape.points)}")
    return "\n".join(out) + "\n"


def write_phantom(phantom: Phantom, out_dir: Union[str, Path]) -> Path:
    """Write cube, white, masks, step scans, spec echo and a manifest to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(out / "cube.hdr", phantom.cube)
    save_cube(out / "white.hdr", phantom.white)
    for i, name in enumerate(phantom.truth.names):
        mask = GrayImage(np.where(phantom.truth.masks[i], 255, 0).astype(np.uint8))
        save_gray(out / "masks" / f"{i:02d}_{name}.pgm", mask)
    for i, scan in enumerate(phantom.step_scans):
        save_gray(out / "scans" / f"step_{i:02d}.pgm", scan)
    (out / "spec.toml").write_text(format_spec(phantom.spec), encoding="utf-8")
    lines = [
        f"tool = strata {__version__}",
        f"width = {phantom.cube.width}",
        f"height = {phantom.cube.height}",
        f"bands = {phantom.cube.bands}",
        f"seed = {phantom.spec.seed}",
        f"noise_sigma = {phantom.spec.noise_sigma!r}",
        f"layers = {', '.join(phantom.truth.names)}",
    ]
    for name, m in zip(phantom.truth.names, phantom.truth.masks):
        lines.append(f"pixels_{name} = {int(m.sum())}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


# -- presets -----------------------------------------------------------------


def _scale(points: Sequence[Point], width: int, height: int) -> tuple[Point, ...]:
    return tuple((x * width, y * height) for x, y in points)


def _default_layers(w: int, h: int) -> tuple[Layer, ...]:
    s = lambda pts: _scale(pts, w, h)  # noqa: E731
    graphite = Layer("graphite", "graphite", (
        Line(s([(0.08, 0.10), (0.40, 0.12), (0.42, 0.40)]), 3),
        Line(s([(0.10, 0.30), (0.30, 0.45)]), 3),
    ))
    chalk = Layer("red_chalk", "red_chalk", (
        Line(s([(0.55, 0.15), (0.85, 0.20), (0.90, 0.45)]), 6),
        Line(s([(0.15, 0.60), (0.45, 0.85)]), 6),
        Line(s([(0.20, 0.85), (0.40, 0.58)]), 6),
    ))
    ink = Layer("ink", "iron_gall_ink", (
        Polygon(s([(0.10, 0.55), (0.50, 0.55), (0.50, 0.92), (0.10, 0.92)])),
        Line(s([(0.55, 0.60), (0.90, 0.90)]), 4),
        Line(s([(0.60, 0.10), (0.60, 0.50)]), 4),
    ), dilution=0.5)
    return graphite, chalk, ink


def default_spec(seed: int = 0, width: int = 256, height: int = 256,
                 bands: int = 1040) -> PhantomSpec:
    """Graphite sketch, red-chalk underdrawing and a diluted iron-gall ink layer."""
    return PhantomSpec(width, height, bands, _default_layers(width, height), seed=seed)


def concealed_chalk_spec(seed: int = 0, width: int = 256, height: int = 256,
                         bands: int = 1040) -> PhantomSpec:
    """Red-chalk strokes entirely under an ink wash that also covers bare paper."""
    s = lambda pts: _scale(pts, width, height)  # noqa: E731
    chalk = Layer("red_chalk", "red_chalk", (
        Line(s([(0.12, 0.20), (0.40, 0.25), (0.45, 0.80)]), 6),
        Line(s([(0.55, 0.18), (0.80, 0.70)]), 6),
        Line(s([(0.20, 0.75), (0.75, 0.82)]), 6),
    ))
    ink = Layer("ink", "iron_gall_ink", (
        Polygon(s([(0.05, 0.10), (0.88, 0.10), (0.88, 0.90), (0.05, 0.90)])),
    ), dilution=0.5)
    return PhantomSpec(width, height, bands, (chalk, ink), seed=seed)


def gradient_spec(seed: int = 0, width: int = 256, height: int = 256, bands: int = 1040,
                  amplitude: float = 0.15) -> PhantomSpec:
    """Two media, partly overlapping, under a horizontal illumination gradient."""
    s = lambda pts: _scale(pts, width, height)  # noqa: E731
    chalk = Layer("red_chalk", "red_chalk", (
        Polygon(s([(0.10, 0.10), (0.45, 0.10), (0.45, 0.60), (0.10, 0.60)])),
    ))
    ink = Layer("ink", "iron_gall_ink", (
        Polygon(s([(0.30, 0.40), (0.80, 0.40), (0.80, 0.85), (0.30, 0.85)])),
    ), dilution=0.5)
    return PhantomSpec(width, height, bands, (chalk, ink),
                       illumination=Illumination("linear_gradient", "x", amplitude), seed=seed)


PRESETS = {
    "default": default_spec,
    "concealed-chalk": concealed_chalk_spec,
    "gradient": gradient_spec,
}


def textured_image(seed: int, size: int = 64, margin: int = 0) -> np.ndarray:
    """Smooth random texture in gray levels ``[0, 255]``, ``size + 2*margin`` square."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    n = size + 2 * margin
    tex = gaussian_filter(rng.normal(size=(n, n)), 2.0, mode="wrap")
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return tex * 255.0
