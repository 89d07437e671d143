"""Transport-plan activations, binarization, and point-prompt extraction.

Per-prototype activations are the per-cell feature magnitude times the plan
column, projected back to pixel resolution, optionally smoothed, summed per
class, and Otsu-binarized. Positive points come from a watershed over the
distance transform of the foreground (one point per basin); negatives are a
lattice over the expanded background. A merge probe watches the foreground
component structure to stop the progressive transport scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.feature import peak_local_max
from skimage.segmentation import watershed

from . import stain
from .errors import ConfigError
from .ot import TransportPlan

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ActivationStack:
    """Per-prototype activation maps at image resolution."""

    maps: np.ndarray
    class_of: tuple[str, ...]

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 3 or m.shape[2] != len(self.class_of):
            raise ValueError("activation stack shape and channel labels disagree")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValueError("activations must be finite and nonnegative")
        object.__setattr__(self, "maps", m)
        object.__setattr__(self, "class_of", tuple(self.class_of))


@dataclass
class PromptSet:
    """Positive/negative integer pixel coordinates, row-major, origin top-left."""

    image_id: str
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]

    def __post_init__(self):
        self.positives = [(int(r), int(c)) for r, c in self.positives]
        self.negatives = [(int(r), int(c)) for r, c in self.negatives]
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ValueError(f"positives and negatives overlap at {sorted(overlap)[:3]}")

    def validate_bounds(self, shape):
        h, w = shape
        for r, c in self.positives + self.negatives:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"prompt ({r}, {c}) outside image {shape}")


def resize_map(arr: np.ndarray, out_shape, mode: str = "bilinear") -> np.ndarray:
    """Resize a 2-D map; samples output pixel centers at (i+0.5)*scale - 0.5."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    oh, ow = out_shape
    if (h, w) == (oh, ow):
        return arr.copy()
    sy, sx = h / oh, w / ow
    ys = (np.arange(oh) + 0.5) * sy - 0.5
    xs = (np.arange(ow) + 0.5) * sx - 0.5
    if mode == "nearest":
        iy = np.clip(np.floor((np.arange(oh) + 0.5) * sy), 0, h - 1).astype(int)
        ix = np.clip(np.floor((np.arange(ow) + 0.5) * sx), 0, w - 1).astype(int)
        return arr[np.ix_(iy, ix)]
    if mode != "bilinear":
        raise ConfigError(f"unknown resize mode {mode!r}")
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - fx) + arr[np.ix_(y0, x1)] * fx
    bot = arr[np.ix_(y1, x0)] * (1 - fx) + arr[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


class GaussianRefiner:
    """Separable Gaussian smoothing; stand-in slot for heavier refinement."""

    def __init__(self, sigma: float = 2.0):
        if sigma <= 0:
            raise ConfigError("refiner sigma must be positive")
        self.sigma = sigma

    def __call__(self, channel: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(channel, self.sigma)


def reweight_and_project(
    features_flat: np.ndarray,
    plan: TransportPlan,
    grid_shape: tuple[int, int],
    target_shape: tuple[int, int],
    class_of,
    refiner=None,
    resize_mode: str = "bilinear",
    allow_unconverged: bool = False,
) -> ActivationStack:
    """Per-prototype activation maps from the transport plan.

    Channel k is the per-cell feature norm times plan column k (slack column
    dropped), reshaped to the feature grid, resized to ``target_shape`` and
    passed through the refiner.
    """
    if not plan.converged and not allow_unconverged:
        raise ValueError("transport plan did not converge; pass allow_unconverged to override")
    feats = np.asarray(features_flat, dtype=np.float64)
    h, w = grid_shape
    if feats.shape[0] != h * w or feats.shape[0] != plan.values.shape[0]:
        raise ValueError("feature rows, grid shape and plan rows disagree")
    transported = plan.transported
    if transported.shape[1] != len(tuple(class_of)):
        raise ValueError("channel labels must match the plan's real columns")
    norms = np.linalg.norm(feats, axis=1)
    weighted = norms[:, None] * transported
    channels = []
    for k in range(weighted.shape[1]):
        cellmap = weighted[:, k].reshape(h, w)
        img = resize_map(cellmap, target_shape, resize_mode)
        if refiner is not None:
            img = np.asarray(refiner(img), dtype=np.float64)
        channels.append(np.maximum(img, 0.0))
    return ActivationStack(np.stack(channels, axis=-1), tuple(class_of))


def aggregate_and_binarize(stack: ActivationStack, bins: int = stain.DEFAULT_BINS):
    """Sum activations per class and Otsu-binarize each aggregate.

    Conflicting pixels (claimed by both maps) go to the side with the higher
    min-max-normalized activation; the foreground wins ties. Returns disjoint
    (fg_map, bg_map).
    """
    labels = np.asarray(stack.class_of)
    if "fg" not in labels or "bg" not in labels:
        raise ValueError("stack needs at least one fg and one bg channel")
    fg_sum = stack.maps[..., labels == "fg"].sum(axis=-1)
    bg_sum = stack.maps[..., labels == "bg"].sum(axis=-1)
    if fg_sum.max() <= fg_sum.min():
        raise ValueError("all-zero or constant fg aggregate activation")
    fg_map = _binarize(fg_sum, bins)
    # a contrast-free background aggregate yields no bg pixels rather than
    # failing; only the foreground side is load-bearing downstream
    bg_map = (
        _binarize(bg_sum, bins)
        if bg_sum.max() > bg_sum.min()
        else np.zeros(bg_sum.shape, dtype=bool)
    )
    both = fg_map & bg_map
    if both.any():
        fg_wins = _normalize(fg_sum) >= _normalize(bg_sum)
        fg_map = fg_map & (~both | fg_wins)
        bg_map = bg_map & ~fg_map
    return fg_map, bg_map


def _binarize(channel, bins):
    return channel > stain.otsu_split_value(channel, bins)


def _normalize(channel):
    lo, hi = channel.min(), channel.max()
    if hi <= lo:
        return np.zeros_like(channel)
    return (channel - lo) / (hi - lo)


def positive_points(
    fg_map: np.ndarray,
    m_fg: np.ndarray,
    min_separation: int = 5,
    min_region_area: int = 10,
) -> list[tuple[int, int]]:
    """One point per watershed basin of the foreground distance transform.

    The activation map is united with the high-confidence stain mask, local
    maxima of the distance transform (8-neighborhood, separated by at least
    ``min_separation``) seed a watershed of the inverted distance map, and
    each basin of at least ``min_region_area`` pixels yields its centroid,
    snapped to the nearest in-region pixel when it falls outside.
    """
    union = np.asarray(fg_map, bool) | np.asarray(m_fg, bool)
    if not union.any():
        return []
    distance = ndimage.distance_transform_edt(union)
    peaks = peak_local_max(
        distance, min_distance=min_separation, exclude_border=False, labels=union.astype(int)
    )
    if peaks.size == 0:
        return []
    markers = np.zeros(union.shape, dtype=int)
    markers[tuple(peaks.T)] = np.arange(1, peaks.shape[0] + 1)
    basins = watershed(-distance, markers, mask=union, connectivity=2)
    points = []
    for region in range(1, peaks.shape[0] + 1):
        rows, cols = np.nonzero(basins == region)
        if rows.size < min_region_area:
            continue
        cy, cx = int(round(rows.mean())), int(round(cols.mean()))
        if not (basins[cy, cx] == region):
            snap = np.argmin((rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2)
            cy, cx = int(rows[snap]), int(cols[snap])
        points.append((cy, cx))
    return points


def negative_points(
    bg_map: np.ndarray,
    fg_map: np.ndarray,
    stride: int = 32,
    margin: int = 5,
) -> list[tuple[int, int]]:
    """Lattice sample of the margin-dilated background, excluding foreground."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    bg = np.asarray(bg_map, bool)
    if margin > 0:
        yy, xx = np.mgrid[-margin : margin + 1, -margin : margin + 1]
        bg = ndimage.binary_dilation(bg, structure=yy**2 + xx**2 <= margin**2)
    allowed = bg & ~np.asarray(fg_map, bool)
    rows = np.arange(0, allowed.shape[0], stride)
    cols = np.arange(0, allowed.shape[1], stride)
    return [(int(r), int(c)) for r in rows for c in cols if allowed[r, c]]


def component_stats(mask: np.ndarray) -> tuple[int, int]:
    """(component count, largest component area) under 8-connectivity."""
    labels, count = ndimage.label(np.asarray(mask, bool), structure=_EIGHT)
    if count == 0:
        return 0, 0
    sizes = np.bincount(labels.ravel())[1:]
    return int(count), int(sizes.max())


def merge_stop_probe(
    fg_map: np.ndarray,
    prev_components: int,
    area_cap: float = 0.2,
    merge_k: int = 2,
) -> bool:
    """True when components merged hard enough to risk conflating nuclei.

    Fires when the component count dropped by at least ``merge_k`` from the
    previous scan step AND the largest component exceeds ``area_cap`` of the
    image. Never fires when ``prev_components`` is 0 (first step).
    """
    if prev_components <= 0:
        return False
    count, largest = component_stats(fg_map)
    mask = np.asarray(fg_map)
    return (prev_components - count >= merge_k) and (largest > area_cap * mask.size)
