"""Dense feature grids from a pluggable patch encoder, plus class prototypes.

An image is tiled into overlapping patches, each patch is encoded into a small
grid of descriptor vectors, and the grids are stitched back (averaging where
patches overlap) into one h x w x d feature map. Class prototypes are K-means
centroids of the feature cells selected by the high-confidence masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import stain
from .errors import ConfigError

FeatureProvider = Callable[[np.ndarray], np.ndarray]
"""Maps an RGB patch (P x P x 3) to a (c x c x d) descriptor grid, deterministically."""


@dataclass(frozen=True)
class FeatureGrid:
    """Stitched dense embedding grid with the patch geometry that produced it."""

    grid: np.ndarray
    patch_size: int
    stride: int

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[0] < 1 or g.shape[1] < 1 or g.shape[2] < 2:
            raise ValueError(f"feature grid must be h x w x d with d >= 2, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("feature grid contains non-finite values")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    def flattened(self) -> np.ndarray:
        """Row-major (h*w) x d view of the grid."""
        h, w, d = self.grid.shape
        return self.grid.reshape(h * w, d)


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class K-means centroids used as matching anchors."""

    vectors: np.ndarray
    class_of: tuple[str, ...]
    k_per_class: int

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        labels = tuple(self.class_of)
        if v.ndim != 2 or v.shape[0] != len(labels):
            raise ValueError("prototype matrix and labels disagree")
        for cls in ("fg", "bg"):
            if sum(1 for c in labels if c == cls) != self.k_per_class:
                raise ValueError(f"expected {self.k_per_class} '{cls}' prototypes")
        if np.any(np.all(v == 0, axis=1)):
            raise ValueError("prototype rows must be nonzero")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "class_of", labels)


class ColorMomentProvider:
    """Built-in model-free encoder: 9-dim stain/color statistics per cell.

    Descriptor per cell: mean RGB (3), mean hematoxylin and eosin
    concentration (2), local s_h variance, mean gradient magnitude of s_h,
    percentile rank of the cell's mean s_h within the patch, and a constant
    bias of 1.
    """

    dim = 9

    def __init__(self, stains: stain.StainMatrix | None = None, cell: int = 16):
        if cell < 1:
            raise ConfigError("cell size must be >= 1")
        self.stains = stains or stain.StainMatrix.ruifrok_johnston()
        self.cell = cell

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64)
        p = patch.shape[0]
        if patch.ndim != 3 or patch.shape[1] != p:
            raise ValueError(f"expected a square HxWx3 patch, got {patch.shape}")
        if p % self.cell != 0:
            raise ValueError(f"cell {self.cell} does not divide patch size {p}")
        c = p // self.cell
        od = stain.to_optical_density(patch, self.stains.reference_intensity)
        maps = stain.deconvolve(od, self.stains)

        def per_cell(arr):
            return arr.reshape(c, self.cell, c, self.cell)

        rgb = patch.reshape(c, self.cell, c, self.cell, 3).mean(axis=(1, 3)) / 255.0
        blocks_h = per_cell(maps.s_h)
        mean_h = blocks_h.mean(axis=(1, 3))
        mean_e = per_cell(maps.s_e).mean(axis=(1, 3))
        var_h = blocks_h.var(axis=(1, 3))
        # gradients stay within each cell so descriptors are strictly local
        if self.cell > 1:
            gy, gx = np.gradient(blocks_h, axis=(1, 3))
            mean_grad = np.hypot(gy, gx).mean(axis=(1, 3))
        else:
            mean_grad = np.zeros((c, c))
        # percentile rank of each cell's mean s_h within this patch; ties share
        # a rank (count of strictly smaller cells) so the descriptor stays
        # translation invariant
        flat = mean_h.ravel()
        rank = np.searchsorted(np.sort(flat), flat, side="left")
        denom = max(flat.size - 1, 1)
        pct = (rank / denom).reshape(c, c)
        ones = np.ones((c, c))
        return np.stack(
            [rgb[..., 0], rgb[..., 1], rgb[..., 2], mean_h, mean_e, var_h, mean_grad, pct, ones],
            axis=-1,
        )


def tile_starts(length: int, patch: int, stride: int) -> list[int]:
    """Patch start offsets covering [0, length) with a clamped final patch."""
    if patch > length:
        raise ValueError(f"patch size {patch} exceeds extent {length}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def encode_stitched(
    image: np.ndarray, provider: FeatureProvider, patch_size: int, stride: int
) -> FeatureGrid:
    """Encode overlapping patches and average their grids into one feature map.

    Args:
        image: H x W x 3 array, 8-bit range.
        provider: patch encoder; its output cell size must divide the patch
            and the stride, and the image extent must be a cell multiple.
        patch_size: square patch edge in pixels, <= min(H, W).
        stride: patch step in pixels, <= patch_size.

    Returns:
        FeatureGrid whose every cell is the mean of all patch encodings
        covering it (complete coverage is guaranteed by clamped tiling).
    """
    image = np.asarray(image)
    h_img, w_img = image.shape[:2]
    if patch_size > min(h_img, w_img):
        raise ConfigError(f"patch_size {patch_size} exceeds image extent {(h_img, w_img)}")
    if stride < 1 or stride > patch_size:
        raise ConfigError("stride must be in [1, patch_size]")

    first = np.asarray(
        provider(image[:patch_size, :patch_size]), dtype=np.float64
    )
    if first.ndim != 3 or first.shape[0] != first.shape[1]:
        raise ValueError(f"provider must return a square c x c x d grid, got {first.shape}")
    cells = first.shape[0]
    dim = first.shape[2]
    if patch_size % cells != 0:
        raise ValueError("provider grid does not evenly divide the patch")
    cell = patch_size // cells
    for name, extent in (("stride", stride), ("image height", h_img), ("image width", w_img)):
        if extent % cell != 0:
            raise ConfigError(f"{name} {extent} is not a multiple of the provider cell {cell}")

    gh, gw = h_img // cell, w_img // cell
    acc = np.zeros((gh, gw, dim))
    cnt = np.zeros((gh, gw, 1))
    for y in tile_starts(h_img, patch_size, stride):
        for x in tile_starts(w_img, patch_size, stride):
            enc = first if (y == 0 and x == 0) else np.asarray(
                provider(image[y : y + patch_size, x : x + patch_size]), dtype=np.float64
            )
            if enc.shape != (cells, cells, dim):
                raise ValueError(
                    f"provider output shape {enc.shape} changed from {(cells, cells, dim)}"
                )
            gy, gx = y // cell, x // cell
            acc[gy : gy + cells, gx : gx + cells] += enc
            cnt[gy : gy + cells, gx : gx + cells] += 1.0
    if cnt.min() < 1:
        raise RuntimeError("stitching left uncovered cells")
    return FeatureGrid(acc / cnt, patch_size=patch_size, stride=stride)


def resize_mask_to_grid(mask: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Downsample a pixel mask to feature resolution by >=50% majority vote."""
    mask = np.asarray(mask, dtype=bool)
    gh, gw = grid_shape
    h, w = mask.shape
    if h % gh != 0 or w % gw != 0:
        raise ValueError(f"mask shape {mask.shape} is not a multiple of grid {grid_shape}")
    by, bx = h // gh, w // gw
    frac = mask.reshape(gh, by, gw, bx).mean(axis=(1, 3))
    return frac >= 0.5


def _kmeans(points: np.ndarray, k: int, seed: int, max_iters: int = 100, tol: float = 1e-6):
    """Deterministic k-means++ with farthest-point reseeding of empty clusters."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    # k-means++ seeding
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((points - centers[j]) ** 2, axis=1))

    objective = []
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        objective.append(float(d2[np.arange(n), labels].sum()))
        new_centers = centers.copy()
        dist_to_own = d2[np.arange(n), labels]
        for j in range(k):
            sel = labels == j
            if sel.any():
                new_centers[j] = points[sel].mean(axis=0)
            else:
                new_centers[j] = points[np.argmax(dist_to_own)]
        shift = np.max(np.linalg.norm(new_centers - centers, axis=1))
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    objective.append(float(d2[np.arange(n), labels].sum()))
    return centers, labels, objective


def extract_prototypes(
    features: FeatureGrid,
    m_fg: np.ndarray,
    m_bg: np.ndarray,
    k: int,
    seed: int,
) -> PrototypeSet:
    """Cluster masked feature cells per class into K centroids.

    Masks must already be at feature resolution (see
    :func:`resize_mask_to_grid`); each class needs at least ``k`` masked
    cells. Foreground prototypes come first in the returned matrix.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    flat = features.flattened()
    vectors, labels = [], []
    for cls, mask in (("fg", np.asarray(m_fg, bool)), ("bg", np.asarray(m_bg, bool))):
        if mask.shape != features.shape:
            raise ValueError(f"{cls} mask shape {mask.shape} != feature grid {features.shape}")
        pts = flat[mask.ravel()]
        if pts.shape[0] < k:
            raise ValueError(f"class '{cls}' has {pts.shape[0]} masked cells, need >= {k}")
        centers, _, objective = _kmeans(pts, k, seed)
        if objective[-1] > objective[0] + 1e-9:
            raise RuntimeError("k-means objective increased")
        vectors.append(centers)
        labels.extend([cls] * k)
    return PrototypeSet(np.concatenate(vectors, axis=0), tuple(labels), k)
