"""Patch tiling and prompt-to-patch assignment.

These mirror the consumer's geometry contract exactly: patch ids index the
row-major grid of clamped tile origins, every positive goes to the patch whose
center is nearest (ties to the smaller id), and its nearest negatives inside
that patch are attached in distance order. Mask files are keyed by
(patch id, index of arrival within the patch), so this assignment is part of
the wire format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def tile_starts(length: int, patch: int, stride: int) -> list[int]:
    if patch > length:
        raise ValueError(f"patch size {patch} exceeds extent {length}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def patch_origins(image_shape, patch: int, stride: int) -> list[tuple[int, int]]:
    h, w = image_shape
    return [(y, x) for y in tile_starts(h, patch, stride) for x in tile_starts(w, patch, stride)]


@dataclass(frozen=True)
class Group:
    positive: tuple[int, int]
    negatives: tuple[tuple[int, int], ...]
    patch_id: int
    index_in_patch: int


def assign_groups(positives, negatives, image_shape, patch: int, stride: int, y_negatives: int):
    origins = patch_origins(image_shape, patch, stride)
    centers = np.array([(y + patch / 2, x + patch / 2) for y, x in origins])
    negs = np.array(negatives, dtype=float).reshape(-1, 2)
    per_patch: dict[int, int] = {}
    groups: list[Group] = []
    for r, c in positives:
        d2 = (centers[:, 0] - r) ** 2 + (centers[:, 1] - c) ** 2
        pid = int(np.argmin(d2))
        oy, ox = origins[pid]
        if not (oy <= r < oy + patch and ox <= c < ox + patch):
            inside = [
                i for i, (y, x) in enumerate(origins)
                if y <= r < y + patch and x <= c < x + patch
            ]
            pid = min(inside, key=lambda i: d2[i])
            oy, ox = origins[pid]
        chosen = ()
        if negs.size and y_negatives > 0:
            in_patch = (
                (negs[:, 0] >= oy) & (negs[:, 0] < oy + patch)
                & (negs[:, 1] >= ox) & (negs[:, 1] < ox + patch)
            )
            idx = np.nonzero(in_patch)[0]
            if idx.size:
                dist = (negs[idx, 0] - r) ** 2 + (negs[idx, 1] - c) ** 2
                order = idx[np.argsort(dist, kind="stable")][:y_negatives]
                chosen = tuple((int(negs[i, 0]), int(negs[i, 1])) for i in order)
        slot = per_patch.get(pid, 0)
        per_patch[pid] = slot + 1
        groups.append(Group((int(r), int(c)), chosen, pid, slot))
    groups.sort(key=lambda g: (g.patch_id, g.index_in_patch))
    return origins, groups
