"""Instance- and semantic-level segmentation evaluation.

Dice compares binarized foregrounds; AJI accumulates matched intersections
over matched unions plus all unmatched pixels; detection/segmentation/
panoptic quality use the standard IoU > 0.5 matching. One-to-one matching is
greedy by descending IoU throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    aji: float
    dq: float
    sq: float
    pq: float
    dice: float
    matches: list = field(default_factory=list)
    per_image: bool = True

    def __post_init__(self):
        for name in ("aji", "dq", "sq", "pq", "dice"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]: {v}")
        if abs(self.pq - self.dq * self.sq) > 1e-12:
            raise ValueError("pq must equal dq * sq")

    def to_dict(self) -> dict:
        return {
            "aji": self.aji,
            "dq": self.dq,
            "sq": self.sq,
            "pq": self.pq,
            "dice": self.dice,
            "matches": [[int(i), int(j), float(v)] for i, j, v in self.matches],
        }


def _as_masks(obj) -> list[np.ndarray]:
    masks = getattr(obj, "masks", obj)
    return [np.asarray(m, bool) for m in masks]


def masks_from_labels(labels: np.ndarray) -> list[np.ndarray]:
    """Instance masks from a label map, ordered by ascending id (0 = background)."""
    labels = np.asarray(labels)
    return [labels == v for v in np.unique(labels) if v != 0]


def dice(gt, pred) -> float:
    """2|G and P| / (|G| + |P|) over binarized unions; both-empty counts as 1."""
    gt_masks, pred_masks = _as_masks(gt), _as_masks(pred)
    shape = _common_shape(gt_masks, pred_masks)
    if shape is None:
        return 1.0
    g = np.zeros(shape, bool)
    for m in gt_masks:
        _check_shape(m, shape)
        g |= m
    p = np.zeros(shape, bool)
    for m in pred_masks:
        _check_shape(m, shape)
        p |= m
    denom = int(g.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(g, p).sum()) / denom


def _common_shape(gt_masks, pred_masks):
    for m in gt_masks + pred_masks:
        return m.shape
    return None


def _check_shape(mask, shape):
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != {shape}")


def _bounds(mask):
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    r = np.nonzero(rows)[0]
    c = np.nonzero(cols)[0]
    return int(r[0]), int(r[-1]), int(c[0]), int(c[-1])


def iou_matrix(gt_masks, pred_masks) -> np.ndarray:
    out = np.zeros((len(gt_masks), len(pred_masks)))
    g_bounds = [_bounds(g) for g in gt_masks]
    p_bounds = [_bounds(p) for p in pred_masks]
    g_areas = [int(g.sum()) for g in gt_masks]
    p_areas = [int(p.sum()) for p in pred_masks]
    for i, g in enumerate(gt_masks):
        gb = g_bounds[i]
        if gb is None:
            continue
        for j, p in enumerate(pred_masks):
            pb = p_bounds[j]
            if pb is None:
                continue
            r0, r1 = max(gb[0], pb[0]), min(gb[1], pb[1])
            c0, c1 = max(gb[2], pb[2]), min(gb[3], pb[3])
            if r1 < r0 or c1 < c0:
                continue
            window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
            inter = int(np.logical_and(g[window], p[window]).sum())
            if inter:
                out[i, j] = inter / (g_areas[i] + p_areas[j] - inter)
    return out


def greedy_match(gt, pred, min_iou: float = 0.0) -> list[tuple[int, int, float]]:
    """One-to-one matches accepted in descending IoU order.

    Only pairs with IoU strictly above ``min_iou`` are candidates; ties break
    on the smaller gt index, then the smaller pred index.
    """
    gt_masks, pred_masks = _as_masks(gt), _as_masks(pred)
    iou = iou_matrix(gt_masks, pred_masks)
    pairs = [
        (i, j, float(iou[i, j]))
        for i in range(iou.shape[0])
        for j in range(iou.shape[1])
        if iou[i, j] > min_iou
    ]
    pairs.sort(key=lambda t: (-t[2], t[0], t[1]))
    used_g, used_p = set(), set()
    matches = []
    for i, j, v in pairs:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        matches.append((i, j, v))
    return matches


def aji(gt, pred) -> float:
    """Aggregated Jaccard index; splits and merges land in the denominator."""
    gt_masks, pred_masks = _as_masks(gt), _as_masks(pred)
    if not gt_masks and not pred_masks:
        return 1.0
    if not gt_masks or not pred_masks:
        return 0.0
    matches = greedy_match(gt_masks, pred_masks, min_iou=0.0)
    matched_g = {i for i, _, _ in matches}
    matched_p = {j for _, j, _ in matches}
    inter = sum(
        int(np.logical_and(gt_masks[i], pred_masks[j]).sum()) for i, j, _ in matches
    )
    union = sum(
        int(np.logical_or(gt_masks[i], pred_masks[j]).sum()) for i, j, _ in matches
    )
    union += sum(int(g.sum()) for i, g in enumerate(gt_masks) if i not in matched_g)
    union += sum(int(p.sum()) for j, p in enumerate(pred_masks) if j not in matched_p)
    if union == 0:
        return 1.0
    return inter / union


def panoptic(gt, pred, tau: float = 0.5) -> tuple[float, float, float]:
    """(DQ, SQ, PQ) with true positives matched greedily at IoU > tau."""
    gt_masks, pred_masks = _as_masks(gt), _as_masks(pred)
    if not gt_masks and not pred_masks:
        return 1.0, 1.0, 1.0
    matches = greedy_match(gt_masks, pred_masks, min_iou=tau)
    tp = len(matches)
    fp = len(pred_masks) - tp
    fn = len(gt_masks) - tp
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = sum(v for _, _, v in matches) / tp if tp else 0.0
    return dq, sq, dq * sq


def evaluate(gt, pred) -> EvalReport:
    """Full per-image report; matches listed at the panoptic threshold."""
    dq, sq, pq = panoptic(gt, pred)
    return EvalReport(
        aji=aji(gt, pred),
        dq=dq,
        sq=sq,
        pq=pq,
        dice=dice(gt, pred),
        matches=greedy_match(gt, pred, min_iou=0.5),
    )


def summarize(reports: dict[str, EvalReport]) -> dict:
    """Dataset-level summary: unweighted means of the per-image metrics."""
    names = ("aji", "dq", "sq", "pq", "dice")
    means = {
        name: float(np.mean([getattr(r, name) for r in reports.values()])) if reports else 0.0
        for name in names
    }
    return {
        "images": len(reports),
        "mean": means,
        "per_image": {stem: r.to_dict() for stem, r in sorted(reports.items())},
    }
