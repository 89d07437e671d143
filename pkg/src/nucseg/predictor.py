"""Patch-level promptable mask prediction behind a stable contract.

Prompts are grouped by the patch whose center is nearest to each positive,
together with its nearest negatives inside that patch. A predictor turns one
group into one mask plus a confidence score; two implementations ship: a
deterministic region-growing oracle over the hematoxylin map, and a
file-backed reader for masks produced externally. Overlapping predictions
merge transitively by mask IoU.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError

log = logging.getLogger(__name__)

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class InstanceSet:
    """Aligned lists of binary masks, scores, and source patch ids."""

    masks: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.masks) == len(self.scores) == len(self.provenance)):
            raise ValueError("masks, scores and provenance must align")
        for i, m in enumerate(self.masks):
            if not m.any():
                raise ValueError(f"mask {i} is empty")
        for s in self.scores:
            if not np.isfinite(s) or s < 0:
                raise ValueError(f"scores must be finite and >= 0, got {s}")

    def __len__(self):
        return len(self.masks)


@dataclass(frozen=True)
class PatchLayout:
    """Square tiling geometry for patch-level prediction."""

    patch_size: int = 512
    overlap_ratio: float = 0.5

    def __post_init__(self):
        if self.patch_size < 16:
            raise ConfigError(f"patch_size must be >= 16, got {self.patch_size}")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ConfigError(f"overlap_ratio must be in [0, 1), got {self.overlap_ratio}")
        if self.stride < 1:
            raise ConfigError("patch stride collapsed below 1 pixel")

    @property
    def stride(self) -> int:
        return int(self.patch_size * (1.0 - self.overlap_ratio))

    def clamped(self, image_shape) -> "PatchLayout":
        """Layout whose patch fits the image (small inputs shrink the patch)."""
        size = min(self.patch_size, *image_shape)
        if size == self.patch_size:
            return self
        return PatchLayout(max(size, 16), self.overlap_ratio)

    def origins(self, image_shape) -> list[tuple[int, int]]:
        """Row-major top-left corners of every patch; ids index this list."""
        from .features import tile_starts

        h, w = image_shape
        return [
            (y, x)
            for y in tile_starts(h, self.patch_size, self.stride)
            for x in tile_starts(w, self.patch_size, self.stride)
        ]


@dataclass(frozen=True)
class PromptGroup:
    """One positive with its attached negatives, in image coordinates."""

    positive: tuple[int, int]
    negatives: tuple[tuple[int, int], ...]
    patch_id: int
    index_in_patch: int


def assign_prompts_to_patches(prompts, layout: PatchLayout, image_shape, y_negatives: int = 2):
    """Group positives by nearest patch center with their nearest negatives.

    Each positive goes to the patch whose center is closest (ties break to
    the smaller patch id); its ``y_negatives`` nearest negatives lying inside
    that same patch are attached. Returns PromptGroups ordered by patch id
    then by arrival order within the patch.
    """
    origins = layout.origins(image_shape)
    centers = np.array([(y + layout.patch_size / 2, x + layout.patch_size / 2) for y, x in origins])
    negatives = np.array(prompts.negatives, dtype=float).reshape(-1, 2)
    per_patch: dict[int, int] = {}
    groups: list[PromptGroup] = []
    for r, c in prompts.positives:
        d2 = (centers[:, 0] - r) ** 2 + (centers[:, 1] - c) ** 2
        pid = int(np.argmin(d2))  # argmin takes the first (smallest id) on ties
        oy, ox = origins[pid]
        if not (oy <= r < oy + layout.patch_size and ox <= c < ox + layout.patch_size):
            inside = [
                i
                for i, (y, x) in enumerate(origins)
                if y <= r < y + layout.patch_size and x <= c < x + layout.patch_size
            ]
            pid = min(inside, key=lambda i: d2[i])
            oy, ox = origins[pid]
        chosen = ()
        if negatives.size and y_negatives > 0:
            in_patch = (
                (negatives[:, 0] >= oy)
                & (negatives[:, 0] < oy + layout.patch_size)
                & (negatives[:, 1] >= ox)
                & (negatives[:, 1] < ox + layout.patch_size)
            )
            idx = np.nonzero(in_patch)[0]
            if idx.size:
                dist = (negatives[idx, 0] - r) ** 2 + (negatives[idx, 1] - c) ** 2
                order = idx[np.argsort(dist, kind="stable")][:y_negatives]
                chosen = tuple((int(negatives[i, 0]), int(negatives[i, 1])) for i in order)
        slot = per_patch.get(pid, 0)
        per_patch[pid] = slot + 1
        groups.append(PromptGroup((int(r), int(c)), chosen, pid, slot))
    groups.sort(key=lambda g: (g.patch_id, g.index_in_patch))
    return groups


@dataclass(frozen=True)
class PatchContext:
    """Everything a predictor may need for one prompt group, in patch coords."""

    image_id: str
    patch_id: int
    prompt_index: int
    rgb: np.ndarray
    s_h: np.ndarray
    positive: tuple[int, int]
    negatives: tuple[tuple[int, int], ...]


class RegionGrowPredictor:
    """Deterministic oracle: grow the seed's connected region on the s_h map.

    Two-level drop-off: the core is the seed's connected component of pixels
    at or above ``drop_frac`` of the seed neighborhood value; the boundary is
    then recovered by expanding the core up to ``expand_px`` steps into
    connected pixels above the lower ``expand_frac`` threshold (nucleus edges
    fade below the core level before reaching background). Small disks around
    each negative act as barriers, so growth truncates before them. A seed
    weaker than ``min_seed`` skips the group. Score is the mean of s_h
    (normalized by the patch max) inside the mask.
    """

    def __init__(
        self,
        drop_frac: float = 0.5,
        min_seed: float = 0.05,
        barrier_radius: int = 2,
        expand_frac: float = 0.3,
        expand_px: int = 2,
    ):
        if not 0.0 < drop_frac < 1.0:
            raise ConfigError("drop_frac must be in (0, 1)")
        if not 0.0 < expand_frac <= drop_frac:
            raise ConfigError("expand_frac must be in (0, drop_frac]")
        if expand_px < 0:
            raise ConfigError("expand_px must be >= 0")
        self.drop_frac = drop_frac
        self.min_seed = min_seed
        self.barrier_radius = barrier_radius
        self.expand_frac = expand_frac
        self.expand_px = expand_px

    def predict(self, ctx: PatchContext):
        s_h = ctx.s_h
        r, c = ctx.positive
        window = s_h[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2]
        seed_value = float(window.mean())
        if seed_value < self.min_seed:
            log.info("skipping group %s/%d: seed value %.4f below %.4f",
                     ctx.image_id, ctx.prompt_index, seed_value, self.min_seed)
            return None
        barrier = np.ones(s_h.shape, dtype=bool)
        for nr, nc in ctx.negatives:
            rr = self.barrier_radius
            yy, xx = np.ogrid[: s_h.shape[0], : s_h.shape[1]]
            barrier &= (yy - nr) ** 2 + (xx - nc) ** 2 > rr**2
        admissible = (s_h >= self.drop_frac * seed_value) & barrier
        if not admissible[r, c]:
            log.info("skipping group %s/%d: seed pixel not admissible", ctx.image_id, ctx.prompt_index)
            return None
        labels, _ = ndimage.label(admissible, structure=_EIGHT)
        mask = labels == labels[r, c]
        if self.expand_px > 0:
            low = (s_h >= self.expand_frac * seed_value) & barrier
            mask = ndimage.binary_dilation(mask, structure=_EIGHT, iterations=self.expand_px, mask=low)
        peak = float(s_h.max())
        score = float(np.clip(s_h[mask].mean() / peak, 0.0, 1.0)) if peak > 0 else 0.0
        return mask, score


class FilePredictor:
    """Reads externally produced masks keyed by (image id, patch id, index)."""

    def __init__(self, mask_root):
        from pathlib import Path

        self.root = Path(mask_root)

    def predict(self, ctx: PatchContext):
        from .interchange import read_mask_file

        base = self.root / ctx.image_id / f"mask_{ctx.patch_id}_{ctx.prompt_index}"
        bin_path = base.with_suffix(".bin")
        if not bin_path.exists():
            log.info("no external mask for %s", bin_path)
            return None
        mask, score = read_mask_file(bin_path)
        if mask.shape != ctx.s_h.shape:
            raise ValueError(f"external mask shape {mask.shape} != patch {ctx.s_h.shape}")
        return mask, score


def predict_patch(predictor, ctx: PatchContext):
    """Run one group through the predictor; failures skip the group, never abort."""
    h, w = ctx.s_h.shape
    for r, c in (ctx.positive, *ctx.negatives):
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"prompt ({r}, {c}) outside the patch")
    try:
        result = predictor.predict(ctx)
    except Exception:
        log.exception("predictor failed on %s patch %d group %d; skipping",
                      ctx.image_id, ctx.patch_id, ctx.prompt_index)
        return None
    if result is None:
        return None
    mask, score = result
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or not mask[ctx.positive]:
        log.info("predictor output rejected for %s/%d/%d: empty or missing its positive",
                 ctx.image_id, ctx.patch_id, ctx.prompt_index)
        return None
    return mask, float(score)


def predict_instances(
    image_id: str,
    rgb: np.ndarray,
    s_h: np.ndarray,
    prompts,
    layout: PatchLayout,
    predictor,
    y_negatives: int = 2,
) -> InstanceSet:
    """Run every prompt group and lift the patch masks into image coordinates."""
    layout = layout.clamped(s_h.shape)
    origins = layout.origins(s_h.shape)
    groups = assign_prompts_to_patches(prompts, layout, s_h.shape, y_negatives)
    masks, scores, provenance = [], [], []
    for group in groups:
        oy, ox = origins[group.patch_id]
        p = layout.patch_size
        ctx = PatchContext(
            image_id=image_id,
            patch_id=group.patch_id,
            prompt_index=group.index_in_patch,
            rgb=rgb[oy : oy + p, ox : ox + p],
            s_h=s_h[oy : oy + p, ox : ox + p],
            positive=(group.positive[0] - oy, group.positive[1] - ox),
            negatives=tuple((r - oy, c - ox) for r, c in group.negatives),
        )
        result = predict_patch(predictor, ctx)
        if result is None:
            continue
        mask, score = result
        canvas = np.zeros(s_h.shape, dtype=bool)
        canvas[oy : oy + p, ox : ox + p] = mask
        masks.append(canvas)
        scores.append(float(np.clip(score, 0.0, 1.0)))
        provenance.append(group.patch_id)
    return InstanceSet(masks, scores, provenance)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    if inter == 0:
        return 0.0
    return float(inter / np.logical_or(a, b).sum())


def merge_overlapped(instances: InstanceSet, iou_merge: float = 0.8) -> InstanceSet:
    """Union-find merge of masks whose pairwise IoU reaches ``iou_merge``.

    Each transitive group collapses to the pixel union; the group's score is
    the max and provenance follows the best-scoring member. Merging repeats
    until no surviving pair reaches the threshold (unions can overlap even
    when their members did not).
    """
    if not 0.0 < iou_merge <= 1.0:
        raise ConfigError(f"iou_merge must be in (0, 1], got {iou_merge}")
    current = InstanceSet(list(instances.masks), list(instances.scores), list(instances.provenance))
    while True:
        merged = _merge_pass(current, iou_merge)
        if len(merged) == len(current):
            return merged
        current = merged


def _merge_pass(instances: InstanceSet, iou_merge: float) -> InstanceSet:
    n = len(instances)
    if n <= 1:
        return instances
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    boxes = [_bbox(m) for m in instances.masks]
    for i in range(n):
        for j in range(i + 1, n):
            if not _boxes_touch(boxes[i], boxes[j]):
                continue
            r0 = min(boxes[i][0], boxes[j][0])
            r1 = max(boxes[i][1], boxes[j][1]) + 1
            c0 = min(boxes[i][2], boxes[j][2])
            c1 = max(boxes[i][3], boxes[j][3]) + 1
            window = (slice(r0, r1), slice(c0, c1))
            if mask_iou(instances.masks[i][window], instances.masks[j][window]) >= iou_merge:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    masks, scores, provenance = [], [], []
    for members in sorted(groups.values(), key=lambda ms: ms[0]):
        union = np.zeros_like(instances.masks[0])
        for i in members:
            union |= instances.masks[i]
        best = max(members, key=lambda i: (instances.scores[i], -i))
        masks.append(union)
        scores.append(instances.scores[best])
        provenance.append(instances.provenance[best])
    return InstanceSet(masks, scores, provenance)


def _bbox(mask):
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    rmin, rmax = np.nonzero(rows)[0][[0, -1]]
    cmin, cmax = np.nonzero(cols)[0][[0, -1]]
    return int(rmin), int(rmax), int(cmin), int(cmax)


def _boxes_touch(a, b):
    return not (a[1] < b[0] or b[1] < a[0] or a[3] < b[2] or b[3] < a[2])
