"""Shared synthetic-image helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from nucseg import stain


def render_disks(
    shape=(96, 96),
    centers=((30, 30), (64, 64)),
    radii=(12, 12),
    disk_h=0.8,
    bg_e=0.25,
    bg_h=0.02,
    seed=0,
):
    """Render hematoxylin disks on an eosin background via the forward OD model.

    Returns (rgb uint8 image, disk boolean mask, per-disk masks).
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    s_h = np.full(shape, bg_h) + rng.uniform(0, 0.01, shape)
    s_e = np.full(shape, bg_e) + rng.uniform(0, 0.02, shape)
    disk_masks = []
    for (cy, cx), r in zip(centers, radii):
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        disk_masks.append(m)
        s_h[m] = disk_h + rng.uniform(-0.05, 0.05)
        s_e[m] = 0.05
    disks = np.any(disk_masks, axis=0) if disk_masks else np.zeros(shape, bool)
    stains = stain.StainMatrix.ruifrok_johnston()
    od = s_h[..., None] * stains.h_vector + s_e[..., None] * stains.e_vector
    rgb = stain.from_optical_density(od, stains.reference_intensity)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8), disks, disk_masks


@pytest.fixture
def disk_image():
    return render_disks()
