"""Containment-aware soft NMS and final label-map rasterization.

A one-shot penalty multiplies each mask's score by 1 - tanh(eps * n) when it
encloses more than one smaller mask (n of them); selection then repeatedly
keeps the best-scoring mask and decays the rest by a function of bounding-box
IoU against it, dropping anything that falls below the keep threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .predictor import InstanceSet, _bbox

DECAYS = ("hard", "linear", "polynomial", "exponential")
SCORE_MODES = ("none", "h_channel", "model", "combined")


@dataclass(frozen=True)
class NmsConfig:
    decay: str = "exponential"
    sigma: float = 0.5
    epsilon_pen: float = 0.5
    tau: float = 0.05
    iou_thresh: float = 0.5
    score_mode: str = "combined"
    containment_frac: float = 0.9

    def __post_init__(self):
        if self.decay not in DECAYS:
            raise ConfigError(f"decay must be one of {DECAYS}, got {self.decay!r}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if self.sigma <= 0 or self.epsilon_pen <= 0:
            raise ConfigError("sigma and epsilon_pen must be positive")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must be in [0, 1), got {self.tau}")
        if not 0.0 < self.containment_frac <= 1.0:
            raise ConfigError("containment_frac must be in (0, 1]")
        if not 0.0 <= self.iou_thresh <= 1.0:
            raise ConfigError("iou_thresh must be in [0, 1]")


def unified_scores(instances: InstanceSet, s_h: np.ndarray | None, mode: str = "combined") -> np.ndarray:
    """Per-mask selection scores combining model confidence and stain response.

    The hematoxylin term is the mean s_h inside each mask, min-max normalized
    across the image's masks (a single mask normalizes to 1).
    """
    if mode not in SCORE_MODES:
        raise ConfigError(f"unknown score mode {mode!r}")
    n = len(instances)
    if n == 0:
        return np.zeros(0)
    if mode == "none":
        return np.ones(n)
    model = np.asarray(instances.scores, dtype=np.float64)
    if mode == "model":
        return model
    if s_h is None:
        raise ConfigError(f"score mode {mode!r} needs the hematoxylin map")
    means = np.empty(n)
    for i, m in enumerate(instances.masks):
        win = _window(_bbox(m))
        means[i] = float(s_h[win][m[win]].mean())
    lo, hi = means.min(), means.max()
    h_term = np.ones(n) if hi <= lo else (means - lo) / (hi - lo)
    if mode == "h_channel":
        return h_term
    return model + h_term


def _window(box):
    return (slice(box[0], box[1] + 1), slice(box[2], box[3] + 1))


def count_contained(mask: np.ndarray, others: InstanceSet, frac: float = 0.9) -> int:
    """Number of strictly smaller masks covered by ``mask`` at >= ``frac``."""
    if not 0.0 < frac <= 1.0:
        raise ConfigError("containment_frac must be in (0, 1]")
    mask = np.asarray(mask, bool)
    candidates = [m for m in others.masks if m is not mask]
    return _count_one(
        mask,
        int(mask.sum()),
        _bbox(mask),
        candidates,
        [int(m.sum()) for m in candidates],
        [_bbox(m) for m in candidates],
        frac,
    )


def _count_one(mask, area, box, others, areas, boxes, frac, skip=-1):
    count = 0
    for j, (other, other_area, obox) in enumerate(zip(others, areas, boxes)):
        if j == skip or other_area >= area:
            continue
        r0, r1 = max(box[0], obox[0]), min(box[1], obox[1])
        c0, c1 = max(box[2], obox[2]), min(box[3], obox[3])
        if r1 < r0 or c1 < c0:
            continue
        window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        inter = int(np.logical_and(mask[window], other[window]).sum())
        if inter / other_area >= frac:
            count += 1
    return count


def bbox_iou(a, b) -> float:
    ry = min(a[1], b[1]) - max(a[0], b[0]) + 1
    rx = min(a[3], b[3]) - max(a[2], b[2]) + 1
    if ry <= 0 or rx <= 0:
        return 0.0
    inter = ry * rx
    area_a = (a[1] - a[0] + 1) * (a[3] - a[2] + 1)
    area_b = (b[1] - b[0] + 1) * (b[3] - b[2] + 1)
    return float(inter / (area_a + area_b - inter))


def _decay(u: float, cfg: NmsConfig) -> float:
    if cfg.decay == "hard":
        return 1.0 if u < cfg.iou_thresh else 0.0
    if cfg.decay == "linear":
        return 1.0 - u
    if cfg.decay == "polynomial":
        return (1.0 - u) ** 2
    return float(np.exp(-(u**2) / cfg.sigma))


def containment_soft_nms(instances: InstanceSet, scores, cfg: NmsConfig) -> InstanceSet:
    """Penalize multi-enclosing masks, then soft-suppress by bbox IoU decay.

    Returns the kept masks in selection order (descending final score) with
    their final internal scores; masks are passed through untouched.
    """
    n = len(instances)
    scores = np.array(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise ValueError("scores must align with instances")
    if n == 0:
        return InstanceSet([], [], [])
    boxes = [_bbox(m) for m in instances.masks]
    areas = [int(m.sum()) for m in instances.masks]
    # one-shot containment penalty over the original set
    working = scores.copy()
    for i, mask in enumerate(instances.masks):
        contained = _count_one(
            mask, areas[i], boxes[i], instances.masks, areas, boxes,
            cfg.containment_frac, skip=i,
        )
        if contained > 1:
            working[i] *= 1.0 - np.tanh(cfg.epsilon_pen * contained)
    # the keep threshold applies throughout: penalized masks below tau never
    # reach selection (and each kept mask's score is >= tau when selected)
    alive = [i for i in range(n) if working[i] >= cfg.tau]
    kept: list[tuple[int, float]] = []
    while alive:
        best = max(alive, key=lambda i: (working[i], -i))
        kept.append((best, float(working[best])))
        alive.remove(best)
        survivors = []
        for i in alive:
            working[i] *= _decay(bbox_iou(boxes[best], boxes[i]), cfg)
            if working[i] >= cfg.tau:
                survivors.append(i)
        alive = survivors
    return InstanceSet(
        [instances.masks[i] for i, _ in kept],
        [s for _, s in kept],
        [instances.provenance[i] for i, _ in kept],
    )


def rasterize(instances: InstanceSet, shape) -> tuple[np.ndarray, list[int]]:
    """Label map from masks in order; later masks claim only unclaimed pixels.

    Instance ids follow the input (selection) order, 1-based; masks that end
    up fully claimed are dropped. Background is 0. Also returns, per label id
    (1-based, in order), the index of the source mask in ``instances``.
    """
    labels = np.zeros(shape, dtype=np.uint16)
    if len(instances) > 65535:
        raise ValueError("more than 65535 instances cannot be rasterized to 16-bit")
    source: list[int] = []
    for idx, mask in enumerate(instances.masks):
        win = _window(_bbox(mask))
        free = mask[win] & (labels[win] == 0)
        if not free.any():
            continue
        labels[win][free] = len(source) + 1
        source.append(idx)
    return labels, source
