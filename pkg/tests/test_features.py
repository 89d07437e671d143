"""Feature stitching, builtin provider, mask downsampling, prototype k-means."""

import numpy as np
import pytest

from nucseg import features
from nucseg.errors import ConfigError

from conftest import render_disks
from oracles import best_kmeans_assignment


def make_provider(cell=8):
    return features.ColorMomentProvider(cell=cell)


class TestBuiltinProvider:
    def test_white_patch_has_zero_od_components(self):
        patch = np.full((32, 32, 3), 255, dtype=np.uint8)
        grid = make_provider()(patch)
        assert grid.shape == (4, 4, 9)
        assert np.all(grid[..., 3] == 0)  # mean s_h
        assert np.all(grid[..., 4] == 0)  # mean s_e
        assert np.all(grid[..., 8] == 1)  # bias

    def test_translation_by_cell_multiple_permutes_descriptors(self):
        img, _, _ = render_disks(shape=(32, 32), centers=((12, 12),), radii=(6,))
        rolled = np.roll(img, shift=(8, 16), axis=(0, 1))
        a = make_provider()(img).reshape(-1, 9)
        b = make_provider()(rolled).reshape(-1, 9)
        sort = lambda g: g[np.lexsort(g.T)]
        assert np.allclose(sort(a), sort(b), atol=1e-12)

    def test_disk_cells_have_higher_hematoxylin(self):
        img, disks, _ = render_disks(shape=(64, 64), centers=((32, 32),), radii=(14,))
        grid = make_provider(cell=8)(img)
        cell_fg = features.resize_mask_to_grid(disks, grid.shape[:2])
        assert grid[cell_fg, 3].min() > grid[~cell_fg, 3].max()

    def test_cell_must_divide_patch(self):
        with pytest.raises(ValueError):
            make_provider(cell=7)(np.zeros((32, 32, 3), dtype=np.uint8))


class TestEncodeStitched:
    def test_constant_image_gives_constant_grid(self):
        img = np.full((64, 64, 3), 180, dtype=np.uint8)
        fg = features.encode_stitched(img, make_provider(), patch_size=32, stride=16)
        flat = fg.flattened()
        assert np.allclose(flat, flat[0], atol=1e-12)

    def test_no_overlap_equals_patchwise_concatenation(self):
        img, _, _ = render_disks(shape=(64, 64))
        provider = make_provider()
        fg = features.encode_stitched(img, provider, patch_size=32, stride=32)
        for py in (0, 32):
            for px in (0, 32):
                block = provider(img[py : py + 32, px : px + 32])
                assert np.allclose(fg.grid[py // 8 : py // 8 + 4, px // 8 : px // 8 + 4], block)

    def test_paper_default_geometry_lattice(self):
        assert len(features.tile_starts(1024, 128, 64)) == 15

    def test_overlap_cells_average_contributions(self):
        # provider output depends only on the patch's mean value, so the
        # expected stitched value can be recomputed from the tiling directly
        calls = {}

        def provider(patch):
            val = float(patch.mean())
            calls[val] = calls.get(val, 0) + 1
            return np.full((4, 4, 2), val)

        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, size=(96, 96, 3)).astype(np.uint8)
        patch, stride = 32, 16
        fg = features.encode_stitched(img, provider, patch_size=patch, stride=stride)
        cell = patch // 4
        acc = np.zeros((96 // cell, 96 // cell))
        cnt = np.zeros_like(acc)
        for y in features.tile_starts(96, patch, stride):
            for x in features.tile_starts(96, patch, stride):
                v = float(img[y : y + patch, x : x + patch].mean())
                acc[y // cell : y // cell + 4, x // cell : x // cell + 4] += v
                cnt[y // cell : y // cell + 4, x // cell : x // cell + 4] += 1
        assert np.abs(fg.grid[..., 0] - acc / cnt).max() < 1e-6
        assert cnt.min() >= 1

    def test_deterministic(self):
        img, _, _ = render_disks()
        a = features.encode_stitched(img, make_provider(), 32, 16)
        b = features.encode_stitched(img, make_provider(), 32, 16)
        assert np.array_equal(a.grid, b.grid)

    def test_dimension_mismatch_rejected(self):
        def bad_provider(patch):
            if patch[0, 0, 0] == 255:
                return np.zeros((4, 4, 2))
            return np.zeros((4, 4, 3))

        img = np.full((64, 64, 3), 255, dtype=np.uint8)
        img[32:, 32:] = 0
        with pytest.raises(ValueError, match="provider"):
            features.encode_stitched(img, bad_provider, 32, 32)

    def test_patch_larger_than_image_rejected(self):
        with pytest.raises(ConfigError):
            features.encode_stitched(np.zeros((16, 16, 3)), make_provider(), 32, 16)


class TestResizeMask:
    def test_majority_vote(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[:4, :2] = True  # left cell half covered -> 50% -> true
        mask[4:, :1] = True  # bottom-left quarter covered -> 25% -> false
        out = features.resize_mask_to_grid(mask, (2, 2))
        assert out.tolist() == [[True, False], [False, False]]


class TestExtractPrototypes:
    def _grid(self, values):
        arr = np.asarray(values, dtype=float)
        return features.FeatureGrid(arr, patch_size=8, stride=8)

    def test_k1_is_masked_mean(self):
        rng = np.random.default_rng(11)
        grid = self._grid(rng.uniform(size=(4, 4, 3)))
        m_fg = np.zeros((4, 4), bool)
        m_fg[:2] = True
        m_bg = ~m_fg
        protos = features.extract_prototypes(grid, m_fg, m_bg, k=1, seed=0)
        assert np.allclose(protos.vectors[0], grid.grid[m_fg].mean(axis=0))
        assert np.allclose(protos.vectors[1], grid.grid[m_bg].mean(axis=0))
        assert protos.class_of == ("fg", "bg")

    def test_k2_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        # two tight, well-separated clusters per class (6 points each class)
        fg_pts = np.concatenate(
            [rng.normal([0, 0], 0.01, (3, 2)), rng.normal([5, 5], 0.01, (3, 2))]
        )
        bg_pts = np.concatenate(
            [rng.normal([10, 0], 0.01, (3, 2)), rng.normal([0, 10], 0.01, (3, 2))]
        )
        cells = np.concatenate([fg_pts, bg_pts]).reshape(4, 3, 2)
        grid = self._grid(cells)
        m_fg = np.zeros((4, 3), bool)
        m_fg[:2] = True
        protos = features.extract_prototypes(grid, m_fg, ~m_fg, k=2, seed=1)
        for pts, sel in ((fg_pts, protos.class_of.index("fg")), (bg_pts, protos.class_of.index("bg"))):
            got = protos.vectors[sel : sel + 2]
            want, _ = best_kmeans_assignment(pts, 2)
            for centroid in want:
                assert np.min(np.linalg.norm(got - centroid, axis=1)) < 1e-3

    def test_only_masked_cells_matter(self):
        rng = np.random.default_rng(19)
        base = rng.uniform(size=(6, 6, 4))
        m_fg = np.zeros((6, 6), bool)
        m_fg[:3] = True
        m_bg = np.zeros((6, 6), bool)
        m_bg[4:] = True
        grid_a = self._grid(base)
        perturbed = base.copy()
        perturbed[3, :, :] += 100.0  # row masked by neither class
        grid_b = self._grid(perturbed)
        pa = features.extract_prototypes(grid_a, m_fg, m_bg, k=2, seed=5)
        pb = features.extract_prototypes(grid_b, m_fg, m_bg, k=2, seed=5)
        assert np.array_equal(pa.vectors, pb.vectors)

    def test_objective_never_increases(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(size=(50, 3))
        _, _, objective = features._kmeans(pts, k=3, seed=7)
        diffs = np.diff(objective)
        assert np.all(diffs <= 1e-9)

    def test_too_few_cells_names_class(self):
        grid = self._grid(np.random.default_rng(0).uniform(size=(3, 3, 2)))
        m_fg = np.zeros((3, 3), bool)
        m_fg[0, 0] = True
        m_bg = np.zeros((3, 3), bool)
        m_bg[2] = True
        with pytest.raises(ValueError, match="fg"):
            features.extract_prototypes(grid, m_fg, m_bg, k=2, seed=0)

    def test_default_k_is_three(self):
        from nucseg.config import FeatureSection

        assert FeatureSection().k == 3
