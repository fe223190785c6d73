"""Principal component analysis of pixel spectra."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import parallel
from .cube_io import CubeHeader, SpectralCube
from .errors import (
    BandCountMismatch,
    ComponentCountMismatch,
    DegenerateInput,
    FormatError,
    InvalidValue,
)

__all__ = [
    "PcaModel",
    "ScoreCube",
    "fit_pca",
    "project",
    "reconstruct",
    "format_model",
    "parse_model",
    "save_model",
    "load_model",
    "score_summary",
]


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Mean spectrum, principal axes (rows) and their variances.

    ``explained_ratio[i] = explained_variance[i] / total_variance``.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float

    def __post_init__(self):
        for name in ("mean", "components", "explained_variance"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.components.ndim != 2 or self.components.shape[1] != self.mean.shape[0]:
            raise InvalidValue("components", f"shape {self.components.shape} does not "
                                             f"match {self.mean.shape[0]} bands")
        if self.explained_variance.shape != (self.components.shape[0],):
            raise InvalidValue("explained_variance", "one value per component required")

    @property
    def bands(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    @property
    def cumulative_ratio(self) -> float:
        return float(self.explained_ratio.sum())


@dataclass(frozen=True, eq=False)
class ScoreCube:
    """Per-pixel component scores, shape ``(height, width, k)``."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 3:
            raise InvalidValue("scores", f"expected (height, width, k), got {s.shape}")
        if not np.isfinite(s).all():
            raise InvalidValue("scores", "non-finite score")
        object.__setattr__(self, "scores", s)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, height: int, width: int) -> "ScoreCube":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix.reshape(height, width, matrix.shape[1]))

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def k(self) -> int:
        return self.scores.shape[2]

    def matrix(self) -> np.ndarray:
        """Scores as an ``(N, k)`` matrix in row-major pixel order."""
        return self.scores.reshape(-1, self.k)


def _as_pixels(data: Union[SpectralCube, np.ndarray]) -> np.ndarray:
    if isinstance(data, SpectralCube):
        return data.pixels()
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidValue("data", f"expected an (N, bands) matrix, got shape {x.shape}")
    return x


def _covariance(x: np.ndarray, mean: np.ndarray) -> np.ndarray:
    n, b = x.shape

    def partial(s: slice) -> np.ndarray:
        c = x[s] - mean
        return c.T @ c

    acc = np.zeros((b, b))
    for part in parallel.map_ordered(partial, parallel.chunks(n, parallel.PIXEL_CHUNK)):
        acc += part
    acc /= n - 1
    return (acc + acc.T) / 2


def _column_mean(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    parts = parallel.map_ordered(lambda s: x[s].sum(axis=0, dtype=np.float64),
                                 parallel.chunks(n, parallel.PIXEL_CHUNK))
    total = np.zeros(x.shape[1])
    for p in parts:
        total += p
    return total / n


def fit_pca(data: Union[SpectralCube, np.ndarray], k: int | None = None,
            variance: float | None = None) -> PcaModel:
    """Fit principal axes of the pixel spectra.

    Exactly one selector is used: ``k`` keeps a fixed number of components,
    ``variance`` keeps the fewest whose cumulative explained ratio reaches the
    target. With neither, all components are kept.

    The covariance uses the ``N - 1`` divisor. Each axis is signed so that its
    largest-magnitude entry is positive.
    """
    if k is not None and variance is not None:
        raise InvalidValue("selector", "give either k or variance, not both")
    x = _as_pixels(data)
    n, b = x.shape
    if n < 2:
        raise DegenerateInput(f"PCA needs at least 2 pixels, got {n}")
    if k is not None and not 0 <= k <= b:
        raise InvalidValue("k", f"{k} outside [0, {b}]")
    if variance is not None and not 0 < variance <= 1:
        raise InvalidValue("variance", f"{variance} outside (0, 1]")

    mean = _column_mean(x)
    cov = _covariance(x, mean)
    total = float(np.trace(cov))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T

    if k is None:
        if variance is None or total <= 0:
            k = b if variance is None else 0
        else:
            cum = np.cumsum(evals) / total
            k = min(int(np.searchsorted(cum, variance, side="left")) + 1, b)

    comps = evecs[:k].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return PcaModel(mean, comps, evals[:k], total)


def project(data: Union[SpectralCube, np.ndarray], model: PcaModel):
    """Scores ``components @ (spectrum - mean)`` for every pixel.

    A :class:`SpectralCube` yields a :class:`ScoreCube`; an ``(N, bands)``
    matrix yields an ``(N, k)`` matrix.
    """
    x = _as_pixels(data)
    if x.shape[1] != model.bands:
        raise BandCountMismatch(model.bands, x.shape[1])
    out = np.empty((x.shape[0], model.k))

    def work(s: slice):
        out[s] = (x[s] - model.mean) @ model.components.T

    parallel.map_ordered(work, parallel.chunks(x.shape[0], parallel.PIXEL_CHUNK))
    if isinstance(data, SpectralCube):
        return ScoreCube.from_matrix(out, data.height, data.width)
    return out


def reconstruct(scores: Union[ScoreCube, np.ndarray], model: PcaModel):
    """Map scores back to spectra: ``mean + scores @ components``.

    Truncated reconstructions can dip slightly below zero, so the returned cube
    skips the nonnegativity check.
    """
    mat = scores.matrix() if isinstance(scores, ScoreCube) else np.asarray(scores, float)
    if mat.ndim != 2 or mat.shape[1] != model.k:
        raise ComponentCountMismatch(model.k, mat.shape[-1] if mat.ndim else 0)
    spectra = model.mean + mat @ model.components
    if not isinstance(scores, ScoreCube):
        return spectra
    values = spectra.T.reshape(model.bands, scores.height, scores.width)
    header = CubeHeader(samples=scores.width, lines=scores.height, bands=model.bands)
    return SpectralCube(header, values, check=False)


# -- model text --------------------------------------------------------------


def _row(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def format_model(model: PcaModel) -> str:
    lines = [
        "# strata pca model",
        f"bands = {model.bands}",
        f"k = {model.k}",
        f"total_variance = {format(model.total_variance, '.17g')}",
        f"mean = {_row(model.mean)}",
    ]
    lines += [f"component = {_row(c)}" for c in model.components]
    lines.append(f"eigenvalues = {_row(model.explained_variance)}")
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> PcaModel:
    fields: dict[str, str] = {}
    components: list[np.ndarray] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed model line {line!r}")
        key = key.strip().lower()
        try:
            if key == "component":
                components.append(np.array(value.split(), dtype=np.float64))
            else:
                fields[key] = value.strip()
        except ValueError:
            raise FormatError(f"non-numeric component row {value!r}") from None
    try:
        bands = int(fields["bands"])
        k = int(fields["k"])
        mean = np.array(fields["mean"].split(), dtype=np.float64)
        evals = np.array(fields.get("eigenvalues", "").split(), dtype=np.float64)
        total = float(fields["total_variance"])
    except KeyError as exc:
        raise FormatError(f"model missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise FormatError(f"malformed model field: {exc}") from None
    if mean.shape != (bands,) or len(components) != k or evals.shape != (k,):
        raise FormatError("model rows disagree with declared bands/k")
    comps = np.vstack(components) if components else np.zeros((0, bands))
    if comps.shape != (k, bands):
        raise FormatError("component rows have the wrong length")
    return PcaModel(mean, comps, evals, total)


def save_model(path: Union[str, Path], model: PcaModel) -> Path:
    path = Path(path)
    path.write_text(format_model(model), encoding="utf-8")
    return path


def load_model(path: Union[str, Path]) -> PcaModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def score_summary(scores: ScoreCube, model: PcaModel) -> str:
    """Per-component statistics table for a score cube."""
    mat = scores.matrix()
    lines = ["# component  eigenvalue  ratio  mean  std  min  max"]
    ratios = model.explained_ratio
    for i in range(scores.k):
        col = mat[:, i]
        lines.append(
            f"{i} {model.explained_variance[i]:.9g} {ratios[i]:.9g} {col.mean():.9g} "
            f"{col.std():.9g} {col.min():.9g} {col.max():.9g}")
    return "\n".join(lines) + "\n"
