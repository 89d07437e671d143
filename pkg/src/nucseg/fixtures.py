"""Synthetic H&E-like fixtures with exact instance ground truth.

Elliptical hematoxylin-stained nuclei are rendered onto a low-frequency
eosin-tinted background in concentration space, then pushed through the
inverse optical-density model exp(-S.Q) * x0 and quantized to 8-bit. Each
nucleus carries a thin reduced-intensity rim inside its boundary (nuclear
envelope contrast), which keeps touching instances separable from the image
itself. Rendering is deterministic per (spec, seed, index).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import stain
from .errors import ConfigError
from .interchange import write_label_map

_MAX_ATTEMPTS = 300


@dataclass
class FixtureSpec:
    images: int = 20
    height: int = 256
    width: int = 256
    nuclei_min: int = 30
    nuclei_max: int = 120
    radius_min: float = 5.0
    radius_max: float = 10.0
    aspect_min: float = 0.6
    intensity_min: float = 0.55
    intensity_max: float = 0.95
    overlap_prob: float = 0.15
    background_eosin: float = 0.25
    background_hematoxylin: float = 0.02
    rim_drop: float = 0.35
    rim_width: float = 1.5
    min_gap: float = 2.0
    noise: float = 0.01

    def validate(self):
        if self.images < 0 or self.height < 32 or self.width < 32:
            raise ConfigError("fixture spec needs images >= 0 and extent >= 32")
        if not 0 <= self.nuclei_min <= self.nuclei_max:
            raise ConfigError("nuclei_min must be in [0, nuclei_max]")
        if not 2.0 <= self.radius_min <= self.radius_max:
            raise ConfigError("radii must satisfy 2 <= radius_min <= radius_max")
        if not 0.0 < self.aspect_min <= 1.0:
            raise ConfigError("aspect_min must be in (0, 1]")
        if not 0.0 < self.intensity_min <= self.intensity_max <= 2.0:
            raise ConfigError("nucleus intensity range invalid")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ConfigError("overlap_prob must be in [0, 1]")
        if not 0.0 <= self.rim_drop < 1.0:
            raise ConfigError("rim_drop must be in [0, 1)")
        if not 0.0 <= self.rim_width < self.radius_min:
            raise ConfigError("rim_width must be in [0, radius_min)")

    @classmethod
    def from_dict(cls, data: dict) -> "FixtureSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown fixture spec keys: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec


def _place_nuclei(spec: FixtureSpec, count: int, rng: np.random.Generator):
    """Sample centers/axes/rotations; a fraction of nuclei overlaps a neighbor."""
    placed = []  # (cy, cx, a, b, theta)
    for i in range(count):
        a = rng.uniform(spec.radius_min, spec.radius_max)
        b = a * rng.uniform(spec.aspect_min, 1.0)
        theta = rng.uniform(0, np.pi)
        wants_overlap = i > 0 and rng.uniform() < spec.overlap_prob
        for attempt in range(_MAX_ATTEMPTS):
            if wants_overlap:
                cy0, cx0, a0, _, _ = placed[rng.integers(len(placed))]
                direction = rng.uniform(0, 2 * np.pi)
                dist = 0.75 * (a + a0)
                cy = cy0 + dist * np.sin(direction)
                cx = cx0 + dist * np.cos(direction)
            else:
                cy = rng.uniform(a, spec.height - a)
                cx = rng.uniform(a, spec.width - a)
            if not (a <= cy <= spec.height - a and a <= cx <= spec.width - a):
                continue
            if not wants_overlap:
                clear = all(
                    np.hypot(cy - py, cx - px) >= a + pa + spec.min_gap
                    for py, px, pa, _, _ in placed
                )
                if not clear:
                    continue
            placed.append((cy, cx, a, b, theta))
            break
        else:
            raise ValueError(
                f"infeasible density: could not place nucleus {i + 1}/{count} "
                f"after {_MAX_ATTEMPTS} attempts"
            )
    return placed


def render_image(spec: FixtureSpec, rng: np.random.Generator):
    """One rendered RGB image plus its instance label map (uint16)."""
    h, w = spec.height, spec.width
    s_e = spec.background_eosin * (
        1.0 + 0.4 * ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=16)
    )
    s_e = np.clip(s_e, 0.05, None)
    s_h = np.clip(
        spec.background_hematoxylin + spec.noise * rng.standard_normal((h, w)), 0.0, None
    )
    labels = np.zeros((h, w), dtype=np.uint16)
    count = int(rng.integers(spec.nuclei_min, spec.nuclei_max + 1))
    nuclei = _place_nuclei(spec, count, rng)
    yy, xx = np.mgrid[0:h, 0:w]
    for idx, (cy, cx, a, b, theta) in enumerate(nuclei, start=1):
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        r2 = u**2 + v**2
        inside = r2 <= 1.0
        if not inside.any():
            continue
        peak = rng.uniform(spec.intensity_min, spec.intensity_max)
        profile = peak * (1.0 - 0.25 * r2)
        rim_inner = max(1.0 - spec.rim_width / min(a, b), 0.5) ** 2
        profile = np.where(r2 >= rim_inner, peak * spec.rim_drop, profile)
        s_h = np.where(inside, profile, s_h)
        s_e = np.where(inside, 0.05, s_e)
        labels[inside] = idx
    # drop instances fully covered by later draws, keep ids consecutive
    remap = np.zeros(len(nuclei) + 1, dtype=np.uint16)
    kept = 0
    for idx in range(1, len(nuclei) + 1):
        if (labels == idx).any():
            kept += 1
            remap[idx] = kept
    labels = remap[labels]
    stains = stain.StainMatrix.ruifrok_johnston()
    od = s_h[..., None] * stains.h_vector + s_e[..., None] * stains.e_vector
    rgb = stain.from_optical_density(od, stains.reference_intensity)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8), labels


def generate_dataset(spec: FixtureSpec, out_dir, seed: int = 0) -> list[str]:
    """Write images/ and gt/ PNG pairs; returns the generated stems."""
    from PIL import Image

    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    stems = []
    for i in range(spec.images):
        rng = np.random.default_rng([seed, i])
        rgb, labels = render_image(spec, rng)
        stem = f"fixture_{i:03d}"
        Image.fromarray(rgb).save(out / "images" / f"{stem}.png")
        write_label_map(out / "gt" / f"{stem}.png", labels)
        stems.append(stem)
    return stems
