"""Header + raw payload cube format, and 8-bit grayscale export.

A cube lives on disk as two files sharing a stem: ``<stem>.hdr`` holds
``key = value`` text and ``<stem>.raw`` holds the interleaved binary samples.
In memory every cube is band-sequential: ``values[band, line, sample]``.
"""

from __future__ import annotations

import enum
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    BandOutOfRange,
    FormatError,
    InvalidCube,
    InvalidValue,
    MissingField,
    NonIncreasingWavelengths,
    NumericError,
    PayloadSizeMismatch,
    UnknownKeyWarning,
)

__all__ = [
    "DataKind",
    "Interleave",
    "ByteOrder",
    "CubeHeader",
    "SpectralCube",
    "GrayImage",
    "parse_header",
    "format_header",
    "read_cube",
    "write_cube",
    "render_band",
    "load_cube",
    "save_cube",
    "encode_pgm",
    "decode_pgm",
    "load_gray",
    "save_gray",
]


class DataKind(str, enum.Enum):
    FLOAT32 = "float32"
    UINT16 = "uint16"

    @property
    def itemsize(self) -> int:
        return 4 if self is DataKind.FLOAT32 else 2


class Interleave(str, enum.Enum):
    BSQ = "bsq"
    BIL = "bil"
    BIP = "bip"


class ByteOrder(str, enum.Enum):
    LITTLE = "little"
    BIG = "big"


@dataclass(frozen=True)
class CubeHeader:
    samples: int
    lines: int
    bands: int
    data_kind: DataKind = DataKind.FLOAT32
    interleave: Interleave = Interleave.BSQ
    byte_order: ByteOrder = ByteOrder.LITTLE
    wavelengths: tuple[float, ...] | None = None

    def __post_init__(self):
        for key in ("samples", "lines", "bands"):
            if getattr(self, key) < 1:
                raise InvalidValue(key, "must be >= 1")
        if self.wavelengths is not None:
            wl = tuple(float(w) for w in self.wavelengths)
            object.__setattr__(self, "wavelengths", wl)
            if len(wl) != self.bands:
                raise InvalidValue(
                    "wavelengths", f"{len(wl)} values for {self.bands} bands")
            for i in range(1, len(wl)):
                if not wl[i] > wl[i - 1]:
                    raise NonIncreasingWavelengths(i)

    @property
    def dtype(self) -> np.dtype:
        order = "<" if self.byte_order is ByteOrder.LITTLE else ">"
        code = "f4" if self.data_kind is DataKind.FLOAT32 else "u2"
        return np.dtype(order + code)

    @property
    def payload_size(self) -> int:
        return self.samples * self.lines * self.bands * self.data_kind.itemsize

    def replace(self, **changes) -> "CubeHeader":
        fields = dict(
            samples=self.samples, lines=self.lines, bands=self.bands,
            data_kind=self.data_kind, interleave=self.interleave,
            byte_order=self.byte_order, wavelengths=self.wavelengths)
        fields.update(changes)
        return CubeHeader(**fields)


class SpectralCube:
    """Immutable reflectance cube with shape ``(bands, lines, samples)``.

    Values are finite and nonnegative. The array is stored read-only; derive new
    cubes instead of mutating.
    """

    __slots__ = ("header", "values")

    def __init__(self, header: CubeHeader, values: np.ndarray, *, check: bool = True):
        values = np.asarray(values)
        if values.dtype.kind not in "fiu":
            raise InvalidCube(f"cube values must be numeric, got {values.dtype}")
        if values.dtype.kind != "f":
            values = values.astype(np.float32)
        expected = (header.bands, header.lines, header.samples)
        if values.shape != expected:
            raise InvalidCube(f"values shape {values.shape} does not match header {expected}")
        if check:
            if not np.isfinite(values).all():
                raise InvalidCube("cube contains non-finite values")
            if (values < 0).any():
                raise InvalidCube("cube contains negative values")
        if values.flags.writeable:
            values = values.view()
            values.flags.writeable = False
        self.header = header
        self.values = values

    @classmethod
    def from_array(cls, values: np.ndarray, wavelengths: Sequence[float] | None = None,
                   **header_fields) -> "SpectralCube":
        """Wrap a ``(bands, lines, samples)`` array, synthesizing the header."""
        values = np.asarray(values)
        if values.ndim != 3:
            raise InvalidCube(f"expected a 3-D array, got shape {values.shape}")
        b, h, w = values.shape
        header = CubeHeader(samples=w, lines=h, bands=b,
                            wavelengths=None if wavelengths is None else tuple(wavelengths),
                            **header_fields)
        return cls(header, values)

    def with_values(self, values: np.ndarray, wavelengths=...) -> "SpectralCube":
        """New cube on the same grid; band count may change."""
        values = np.asarray(values)
        wl = self.header.wavelengths if wavelengths is ... else wavelengths
        header = self.header.replace(
            bands=values.shape[0],
            wavelengths=None if wl is None else tuple(wl),
            data_kind=DataKind.FLOAT32)
        return SpectralCube(header, values)

    @property
    def bands(self) -> int:
        return self.header.bands

    @property
    def height(self) -> int:
        return self.header.lines

    @property
    def width(self) -> int:
        return self.header.samples

    @property
    def wavelengths(self) -> np.ndarray | None:
        wl = self.header.wavelengths
        return None if wl is None else np.asarray(wl)

    def pixels(self) -> np.ndarray:
        """Pixel spectra as an ``(N, bands)`` matrix in row-major pixel order."""
        return self.values.reshape(self.bands, -1).T

    def __repr__(self):
        return (f"SpectralCube({self.width}x{self.height}x{self.bands}, "
                f"dtype={self.values.dtype})")


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise InvalidValue("pixels", f"expected 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise InvalidValue("pixels", "values outside [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


# -- header text -------------------------------------------------------------

_REQUIRED = ("samples", "lines", "bands", "data_kind", "interleave", "byte_order")
_KNOWN = set(_REQUIRED) | {"wavelengths"}


def _positive_int(key: str, raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise InvalidValue(key, f"{raw!r} is not an integer") from None
    if value < 1:
        raise InvalidValue(key, f"{value} must be >= 1")
    return value


def _enum_value(enum_cls, key: str, raw: str):
    try:
        return enum_cls(raw.lower())
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise InvalidValue(key, f"{raw!r} not one of {allowed}") from None


def parse_header(text: str) -> CubeHeader:
    """Parse ``key = value`` header text.

    Keys are case-insensitive; ``#`` starts a comment. Unknown keys trigger an
    :class:`~strata.errors.UnknownKeyWarning` and are otherwise ignored.
    """
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in _KNOWN:
            warnings.warn(f"ignoring unknown header key {key!r}", UnknownKeyWarning, stacklevel=2)
            continue
        fields[key] = value

    for key in _REQUIRED:
        if key not in fields:
            raise MissingField(key)

    wavelengths = None
    raw_wl = fields.get("wavelengths", "").strip().strip("{}").strip()
    if raw_wl:
        try:
            wavelengths = tuple(float(tok) for tok in re.split(r"[,\s]+", raw_wl) if tok)
        except ValueError:
            raise InvalidValue("wavelengths", "non-numeric entry") from None
        if not all(np.isfinite(wavelengths)):
            raise InvalidValue("wavelengths", "non-finite entry")

    return CubeHeader(
        samples=_positive_int("samples", fields["samples"]),
        lines=_positive_int("lines", fields["lines"]),
        bands=_positive_int("bands", fields["bands"]),
        data_kind=_enum_value(DataKind, "data_kind", fields["data_kind"]),
        interleave=_enum_value(Interleave, "interleave", fields["interleave"]),
        byte_order=_enum_value(ByteOrder, "byte_order", fields["byte_order"]),
        wavelengths=wavelengths,
    )


def format_header(header: CubeHeader) -> str:
    lines = [
        "# strata cube header",
        f"samples = {header.samples}",
        f"lines = {header.lines}",
        f"bands = {header.bands}",
        f"data_kind = {header.data_kind.value}",
        f"interleave = {header.interleave.value}",
        f"byte_order = {header.byte_order.value}",
    ]
    if header.wavelengths is not None:
        lines.append("wavelengths = " + ", ".join(repr(w) for w in header.wavelengths))
    return "\n".join(lines) + "\n"


# -- payload -----------------------------------------------------------------

# axis order of each on-disk layout, expressed in (band, line, sample) = (0, 1, 2)
_LAYOUT = {
    Interleave.BSQ: (0, 1, 2),
    Interleave.BIL: (1, 0, 2),
    Interleave.BIP: (1, 2, 0),
}


def read_cube(header: CubeHeader, payload: bytes) -> SpectralCube:
    """Decode a raw payload into a band-sequential cube.

    uint16 samples are widened to float32 without scaling.
    """
    expected = header.payload_size
    if len(payload) != expected:
        raise PayloadSizeMismatch(expected, len(payload))
    layout = _LAYOUT[header.interleave]
    dims = (header.bands, header.lines, header.samples)
    raw = np.frombuffer(payload, dtype=header.dtype).reshape([dims[a] for a in layout])
    values = np.transpose(raw, np.argsort(layout)).astype(np.float32)
    return SpectralCube(header, np.ascontiguousarray(values))


def write_cube(cube: SpectralCube, interleave: Interleave | str = Interleave.BSQ,
               byte_order: ByteOrder | str = ByteOrder.LITTLE,
               data_kind: DataKind | str = DataKind.FLOAT32) -> tuple[str, bytes]:
    """Serialize ``cube`` into header text and payload bytes.

    Float32 output is exact for cubes whose values are float32-representable.
    For uint16 output the values must already be integers in ``[0, 65535]``.
    """
    interleave = Interleave(interleave)
    byte_order = ByteOrder(byte_order)
    data_kind = DataKind(data_kind)
    header = cube.header.replace(interleave=interleave, byte_order=byte_order,
                                 data_kind=data_kind)
    values = cube.values
    if data_kind is DataKind.UINT16:
        if values.max(initial=0) > 65535 or not np.array_equal(values, np.round(values)):
            raise NumericError("uint16 output requires integral values in [0, 65535]")
    on_disk = np.transpose(values, _LAYOUT[interleave])
    payload = np.ascontiguousarray(on_disk, dtype=header.dtype).tobytes()
    return format_header(header), payload


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def load_cube(path: Union[str, Path]) -> SpectralCube:
    """Load ``<stem>.hdr`` and its sibling ``<stem>.raw``."""
    path = Path(path)
    if path.suffix != ".hdr":
        path = path.with_suffix(".hdr")
    try:
        text = path.read_text(encoding="utf-8")
        payload = _payload_path(path).read_bytes()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not UTF-8 text") from exc
    return read_cube(parse_header(text), payload)


def save_cube(path: Union[str, Path], cube: SpectralCube,
              interleave: Interleave | str = Interleave.BSQ) -> Path:
    path = Path(path)
    if path.suffix != ".hdr":
        path = path.with_suffix(".hdr")
    text, payload = write_cube(cube, interleave)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    _payload_path(path).write_bytes(payload)
    return path


# -- grayscale ---------------------------------------------------------------


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def render_band(cube: SpectralCube, band: int,
                range: Union[str, tuple[float, float]] = "minmax") -> GrayImage:
    """Map one band plane linearly onto ``[0, 255]``.

    ``range`` is ``"minmax"`` (the plane's own extrema) or a ``(lo, hi)`` pair;
    values outside a fixed range are clipped. A constant plane renders as 0.
    """
    if not 0 <= band < cube.bands:
        raise BandOutOfRange(band, cube.bands)
    plane = cube.values[band].astype(np.float64)
    if isinstance(range, str):
        if range != "minmax":
            raise InvalidValue("range", f"unknown range mode {range!r}")
        lo, hi = float(plane.min()), float(plane.max())
    else:
        lo, hi = (float(v) for v in range)
        if not hi > lo:
            raise InvalidValue("range", f"fixed range needs hi > lo, got ({lo}, {hi})")
    if hi == lo:
        return GrayImage(np.zeros(plane.shape, np.uint8))
    scaled = (plane - lo) / (hi - lo) * 255.0
    return GrayImage(np.clip(_round_half_up(scaled), 0, 255).astype(np.uint8))


def encode_pgm(image: GrayImage) -> bytes:
    head = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return head + np.ascontiguousarray(image.pixels).tobytes()


def decode_pgm(data: bytes) -> GrayImage:
    """Decode binary PGM (P5, maxval <= 255); ``#`` comments allowed in the header."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM geometry {width}x{height} maxval {maxval}")
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise PayloadSizeMismatch(width * height, len(raster))
    return GrayImage(np.frombuffer(raster, np.uint8).reshape(height, width).copy())


def save_gray(path: Union[str, Path], image: GrayImage) -> Path:
    """Write ``image`` as PGM, or as PNG when the suffix asks for it (needs Pillow)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(image.pixels, mode="L").save(path)
    else:
        path.write_bytes(encode_pgm(image))
    return path


def load_gray(path: Union[str, Path]) -> GrayImage:
    return decode_pgm(Path(path).read_bytes())
