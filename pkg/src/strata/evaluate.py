"""Ground truth from sequential scans, translation registration, and cluster scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cluster import LabelMap
from .cube_io import GrayImage, SpectralCube
from .errors import DegenerateImage, DimensionMismatch, InvalidValue, TooFewScans

__all__ = [
    "BACKGROUND",
    "LayerGroundTruth",
    "MatchReport",
    "otsu_threshold",
    "luminance",
    "derive_layers",
    "register_translation",
    "shift_image",
    "match_clusters",
    "format_report",
]

BACKGROUND = "background"


@dataclass(frozen=True, eq=False)
class LayerGroundTruth:
    """Ordered per-layer masks; index 0 was drawn first."""

    names: tuple[str, ...]
    masks: np.ndarray  # (layers, height, width) bool

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 3:
            raise InvalidValue("masks", f"expected (layers, height, width), got {masks.shape}")
        names = tuple(self.names)
        if len(names) != masks.shape[0]:
            raise InvalidValue("names", "one name per mask required")
        if len(set(names)) != len(names) or BACKGROUND in names:
            raise InvalidValue("names", "layer names must be unique and not 'background'")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "names", names)

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]

    def mask(self, name: str) -> np.ndarray:
        return self.masks[self.names.index(name)]

    def background(self) -> np.ndarray:
        return ~self.masks.any(axis=0)

    def top_layer(self) -> np.ndarray:
        """Region index per pixel: 0 = background, ``i + 1`` = layer ``i`` on top."""
        top = np.zeros((self.height, self.width), np.int64)
        for i, m in enumerate(self.masks):
            top[m] = i + 1
        return top


@dataclass(frozen=True)
class MatchReport:
    assignment: dict[int, str]
    per_layer_iou: dict[str, float]
    pixel_accuracy: float
    purity: float


# -- layer derivation --------------------------------------------------------


def luminance(scan: Union[GrayImage, SpectralCube, np.ndarray]) -> np.ndarray:
    """Single-channel float image; multi-channel input collapses to the channel mean."""
    if isinstance(scan, GrayImage):
        return scan.pixels.astype(np.float64)
    if isinstance(scan, SpectralCube):
        return scan.values.mean(axis=0, dtype=np.float64)
    arr = np.asarray(scan, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=2)
    if arr.ndim != 2:
        raise InvalidValue("scan", f"unsupported shape {arr.shape}")
    return arr


def otsu_threshold(image: np.ndarray) -> float:
    """Otsu threshold over a 256-bin histogram of values in ``[0, 255]``.

    Returns the bin edge ``t``; foreground is ``value > t``.
    """
    bins = np.clip(np.floor(image), 0, 255).astype(np.int64).ravel()
    hist = np.bincount(bins, minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    m0 = np.cumsum(hist * levels)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 / total - m0) ** 2 / (w0 * w1 / total)
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    return float(np.argmax(between))


def derive_layers(scans: Sequence, threshold: Union[str, float] = "otsu",
                  names: Sequence[str] | None = None) -> LayerGroundTruth:
    """Layer masks from consecutive scans: ``|scan[i+1] - scan[i]| > threshold``.

    Scans are compared in luminance on the 0-255 scale. ``threshold="otsu"``
    picks a threshold per difference image.
    """
    if len(scans) < 2:
        raise TooFewScans(f"need at least 2 scans, got {len(scans)}")
    lum = [luminance(s) for s in scans]
    shape = lum[0].shape
    for i, im in enumerate(lum):
        if im.shape != shape:
            raise DimensionMismatch(f"scan {i} has shape {im.shape}, scan 0 has {shape}")
    if names is None:
        names = [f"layer{i}" for i in range(len(lum) - 1)]
    masks = []
    for before, after in zip(lum[:-1], lum[1:]):
        diff = np.abs(after - before)
        t = otsu_threshold(diff) if threshold == "otsu" else float(threshold)
        masks.append(diff > t)
    return LayerGroundTruth(tuple(names), np.stack(masks))


# -- registration ------------------------------------------------------------


def shift_image(image: np.ndarray, dx: int, dy: int, fill: float = 0) -> np.ndarray:
    """Translate content by ``(dx, dy)``: ``out[y, x] = image[y - dy, x - dx]``."""
    out = np.full_like(image, fill)
    h, w = image.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = image[ys, xs]
    return out


def _zncc(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den <= 0:
        return None
    return float((a * b).sum() / den)


def register_translation(reference: Union[GrayImage, np.ndarray],
                         moving: Union[GrayImage, np.ndarray],
                         max_shift: int) -> tuple[int, int]:
    """Integer shift ``(dx, dy)`` such that ``moving[y + dy, x + dx] ~ reference[y, x]``.

    Exhaustive search over ``[-max_shift, max_shift]^2`` maximizing zero-mean
    normalized cross-correlation on the overlap. Ties prefer the smallest
    ``|dx| + |dy|``, then the lexicographically smallest ``(dx, dy)``.
    """
    ref = luminance(reference)
    mov = luminance(moving)
    if ref.shape != mov.shape:
        raise DimensionMismatch(f"reference {ref.shape} vs moving {mov.shape}")
    h, w = ref.shape
    if max_shift < 0 or 2 * max_shift >= min(h, w):
        raise InvalidValue("max_shift", f"{max_shift} must be < min(width, height) / 2")

    best_key = None
    best = None
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            r = ref[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            m = mov[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
            score = _zncc(r, m)
            if score is None:
                continue
            key = (-score, abs(dx) + abs(dy), dx, dy)
            if best_key is None or key < best_key:
                best_key, best = key, (dx, dy)
    if best is None:
        raise DegenerateImage("zero variance in every candidate overlap")
    return best


# -- cluster scoring ---------------------------------------------------------


def _contingency(labels: np.ndarray, k: int, regions: Sequence[np.ndarray]) -> np.ndarray:
    flat = labels.ravel()
    return np.stack([np.bincount(flat[r.ravel()], minlength=k) for r in regions], axis=1)


def _assign(overlap: np.ndarray) -> np.ndarray:
    """Cluster -> region map maximizing total overlap.

    When there are at least as many clusters as regions every region receives a
    cluster and the surplus clusters join their best-overlapping region;
    otherwise each cluster gets a distinct region.
    """
    c, r = overlap.shape
    if c >= r:
        free = np.repeat(overlap.max(axis=1, keepdims=True), c - r, axis=1)
        gain = np.hstack([overlap, free])
        rows, cols = linear_sum_assignment(-gain)
        out = np.empty(c, np.int64)
        for i, j in zip(rows, cols):
            out[i] = j if j < r else int(np.argmax(overlap[i]))
        return out
    rows, cols = linear_sum_assignment(-overlap)
    out = np.empty(c, np.int64)
    out[rows] = cols
    return out


def match_clusters(labels: LabelMap, truth: LayerGroundTruth) -> MatchReport:
    """Score a label map against ground-truth layers.

    Clusters are mapped onto ``background`` + layers so that the summed pixel
    overlap is maximal, where a layer's overlap is counted against its full
    mask (pixels concealed under later layers still count for it). Per-layer
    IoU compares the union of a layer's clusters with its full mask. Pixel
    accuracy and purity use disjoint regions in which each pixel belongs to
    the topmost layer covering it.
    """
    if (labels.height, labels.width) != (truth.height, truth.width):
        raise DimensionMismatch(
            f"labels {labels.width}x{labels.height}, truth {truth.width}x{truth.height}")
    k = labels.k
    names = (BACKGROUND,) + truth.names
    top = truth.top_layer()
    overlap = _contingency(labels.labels, k, [truth.background()] + list(truth.masks))
    disjoint = _contingency(labels.labels, k, [top == j for j in range(len(names))])

    # clusters enter the assignment in an order fixed by their overlap counts,
    # so relabeling the input cannot change the outcome
    order = sorted(range(k), key=lambda c: (tuple(overlap[c]), tuple(disjoint[c])))
    mapping = np.empty(k, np.int64)
    mapping[order] = _assign(overlap[order])

    assignment = {c: names[mapping[c]] for c in range(k)}

    iou = {}
    for i, name in enumerate(truth.names):
        mine = np.flatnonzero(mapping == i + 1)
        pred = np.isin(labels.labels, mine)
        gt = truth.masks[i]
        union = np.logical_or(pred, gt).sum()
        iou[name] = 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)

    n = top.size
    accuracy = float((mapping[labels.labels] == top).sum() / n)
    purity = float(disjoint.max(axis=1).sum() / n)
    return MatchReport(assignment, iou, accuracy, purity)


def format_report(report: MatchReport) -> str:
    lines = [f"iou_{name} = {value:.6f}" for name, value in report.per_layer_iou.items()]
    lines.append(f"pixel_accuracy = {report.pixel_accuracy:.6f}")
    lines.append(f"purity = {report.purity:.6f}")
    lines.append("# cluster -> region")
    lines += [f"cluster_{c} = {region}" for c, region in sorted(report.assignment.items())]
    return "\n".join(lines) + "\n"
