"""H&E stain deconvolution and high-confidence region extraction.

RGB intensities are mapped to optical density, where stain concentrations
combine linearly. A fixed two-stain color basis is pseudo-inverted to recover
per-pixel hematoxylin/eosin concentration maps; Otsu's threshold on the
hematoxylin channel gives a coarse nuclear/background split, and the strongest
fraction of each side forms the high-confidence foreground/background masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Ruifrok & Johnston H&E color-deconvolution vectors (OD space, unnormalized).
RUIFROK_H = (0.650, 0.704, 0.286)
RUIFROK_E = (0.072, 0.990, 0.105)

DEFAULT_BINS = 256


@dataclass(frozen=True)
class StainMatrix:
    """Unit stain color vectors in OD space plus the white reference intensity."""

    h_vector: np.ndarray
    e_vector: np.ndarray
    reference_intensity: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h_vector, dtype=np.float64).reshape(3)
        e = np.asarray(self.e_vector, dtype=np.float64).reshape(3)
        x0 = np.broadcast_to(
            np.asarray(self.reference_intensity, dtype=np.float64), (3,)
        ).copy()
        for name, v in (("h_vector", h), ("e_vector", e)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be unit length, got norm {np.linalg.norm(v)!r}")
        if np.linalg.norm(np.cross(h, e)) <= 1e-6:
            raise ConfigError("stain vectors are (near) linearly dependent")
        if np.any(x0 <= 0):
            raise ConfigError("reference_intensity components must be positive")
        object.__setattr__(self, "h_vector", h)
        object.__setattr__(self, "e_vector", e)
        object.__setattr__(self, "reference_intensity", x0)

    @classmethod
    def from_vectors(cls, h, e, reference_intensity=255.0) -> "StainMatrix":
        """Build from arbitrary-scale stain vectors; normalizes to unit length."""
        h = np.asarray(h, dtype=np.float64).reshape(3)
        e = np.asarray(e, dtype=np.float64).reshape(3)
        hn, en = np.linalg.norm(h), np.linalg.norm(e)
        if hn == 0 or en == 0:
            raise ConfigError("stain vectors must be nonzero")
        return cls(h / hn, e / en, reference_intensity)

    @classmethod
    def ruifrok_johnston(cls, reference_intensity=255.0) -> "StainMatrix":
        return cls.from_vectors(RUIFROK_H, RUIFROK_E, reference_intensity)

    def basis(self) -> np.ndarray:
        """3x2 matrix with the stain vectors as columns."""
        return np.stack([self.h_vector, self.e_vector], axis=1)


@dataclass(frozen=True)
class StainMaps:
    """Nonnegative per-pixel hematoxylin/eosin concentration grids."""

    s_h: np.ndarray
    s_e: np.ndarray

    def __post_init__(self):
        s_h = np.asarray(self.s_h, dtype=np.float64)
        s_e = np.asarray(self.s_e, dtype=np.float64)
        if s_h.shape != s_e.shape or s_h.ndim != 2:
            raise ValueError(f"concentration maps must share an HxW shape, got {s_h.shape} / {s_e.shape}")
        if np.any(s_h < 0) or np.any(s_e < 0):
            raise ValueError("concentration maps must be nonnegative")
        object.__setattr__(self, "s_h", s_h)
        object.__setattr__(self, "s_e", s_e)

    @property
    def shape(self) -> tuple[int, int]:
        return self.s_h.shape


def to_optical_density(image: np.ndarray, reference_intensity=255.0) -> np.ndarray:
    """Map raw intensities to optical density: OD = -log(x / x0).

    Zero intensities are lifted to 1 before the log so the output stays
    finite; values above the reference are clamped to it (OD 0).
    """
    x0 = np.broadcast_to(np.asarray(reference_intensity, dtype=np.float64), (3,))
    if np.any(x0 <= 0):
        raise ConfigError("reference intensity must be positive")
    x = np.asarray(image, dtype=np.float64)
    x = np.clip(x, 1.0, x0)
    return -np.log(x / x0)


def from_optical_density(od: np.ndarray, reference_intensity=255.0) -> np.ndarray:
    """Inverse of :func:`to_optical_density` (continuous, no quantization)."""
    x0 = np.broadcast_to(np.asarray(reference_intensity, dtype=np.float64), (3,))
    return np.exp(-np.asarray(od, dtype=np.float64)) * x0


def deconvolve(od: np.ndarray, stains: StainMatrix) -> StainMaps:
    """Least-squares decomposition of an OD grid onto the stain basis.

    Applies the Moore-Penrose pseudoinverse of the 3x2 stain basis per pixel
    and clamps negative concentrations to zero.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 OD grid, got shape {od.shape}")
    basis = stains.basis()
    if np.linalg.cond(basis) > 1e8:
        raise ConfigError("stain matrix is numerically degenerate")
    pinv = np.linalg.pinv(basis)  # 2x3
    conc = od @ pinv.T
    conc = np.maximum(conc, 0.0)
    return StainMaps(conc[..., 0], conc[..., 1])


def histogram(values: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Histogram over the observed min-max range of ``values``.

    Returns (counts, edges). A constant input yields a single occupied bin.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return counts.astype(np.float64), edges


def otsu_threshold(counts: np.ndarray) -> int:
    """Bin index maximizing the between-class variance.

    Class 0 holds bins [0, t], class 1 holds bins (t, L-1]; only splits with
    both classes non-empty are candidates and ties resolve to the smallest t.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("histogram must be a 1-D array with at least 2 bins")
    if np.any(counts < 0):
        raise ValueError("histogram counts must be nonnegative")
    total = counts.sum()
    if total <= 0 or np.count_nonzero(counts) < 2:
        raise ValueError("no separating threshold: histogram has fewer than two occupied bins")
    p = counts / total
    levels = np.arange(counts.size, dtype=np.float64)
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * levels)
    mean_total = m0[-1]
    w1 = 1.0 - w0
    # between-class variance for every split t; undefined when a class is empty
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mean_total - m0) / w1
        var = w0 * (mu0 - mean_total) ** 2 + w1 * (mu1 - mean_total) ** 2
    var = var[:-1]
    valid = (w0[:-1] > 0) & (w1[:-1] > 0)
    var = np.where(valid, var, -np.inf)
    return int(np.argmax(var))  # argmax returns the first (smallest) maximizer


def otsu_split_value(values: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Otsu threshold of ``values`` expressed in value units (upper edge of bin t)."""
    counts, edges = histogram(values, bins)
    t = otsu_threshold(counts)
    return float(edges[t + 1])


def high_confidence_masks(
    maps: StainMaps, coarse_split: float, ratio: float
) -> tuple[np.ndarray, np.ndarray]:
    """Top-``ratio`` stain-intensity masks inside the coarse fg/bg split.

    Coarse foreground is s_h > ``coarse_split``. Within it the strongest
    ``ratio`` fraction by s_h becomes the foreground mask; within the coarse
    background the strongest ``ratio`` fraction by s_e (eosin marks
    non-nuclear tissue) becomes the background mask. The two are disjoint by
    construction.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    coarse_fg = maps.s_h > coarse_split
    coarse_bg = ~coarse_fg
    empty = [name for name, m in (("foreground", coarse_fg), ("background", coarse_bg)) if not m.any()]
    if empty:
        raise ValueError(f"coarse region empty: {', '.join(empty)}")
    m_fg = _top_fraction(maps.s_h, coarse_fg, ratio)
    m_bg = _top_fraction(maps.s_e, coarse_bg, ratio)
    return m_fg, m_bg


def _top_fraction(channel: np.ndarray, region: np.ndarray, ratio: float) -> np.ndarray:
    """Keep the round(ratio * |region|) strongest region pixels by channel value."""
    flat_idx = np.flatnonzero(region.ravel())
    keep = max(1, int(round(ratio * flat_idx.size)))
    vals = channel.ravel()[flat_idx]
    # stable sort on negated values: ties keep row-major order, deterministic
    order = np.argsort(-vals, kind="stable")[:keep]
    mask = np.zeros(channel.size, dtype=bool)
    mask[flat_idx[order]] = True
    return mask.reshape(channel.shape)
