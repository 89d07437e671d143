"""Export embeddings or promptable-segmenter masks in nucseg interchange formats.

Exit codes: 0 success, 1 bad arguments, 2 runtime failure (including a
missing model checkpoint).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats, models, tiling

log = logging.getLogger("nucseg_adapter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nucseg-adapter", description=__doc__)
    parser.add_argument("--image", required=True, help="input RGB image")
    parser.add_argument("--mode", required=True, choices=["embed", "predict"])
    parser.add_argument("--model", required=True, help="TorchScript checkpoint path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--patch-size", type=int, default=128, help="patch edge in pixels")
    parser.add_argument("--stride", type=int, default=None,
                        help="embed-mode patch step (default: patch size / 2)")
    parser.add_argument("--overlap-ratio", type=float, default=0.5,
                        help="predict-mode patch overlap ratio")
    parser.add_argument("--prompts", default=None, help="prompts JSON (predict mode)")
    parser.add_argument("--negatives", type=int, default=2,
                        help="nearest negatives attached per positive")
    return parser


def run_embed(args, image: np.ndarray) -> int:
    model = models.load_model(args.model)
    stride = args.stride or args.patch_size // 2
    h, w = image.shape[:2]
    first = models.encode_patch(model, image[: args.patch_size, : args.patch_size])
    cells, dim = first.shape[0], first.shape[2]
    if args.patch_size % cells != 0:
        raise ValueError(f"encoder grid {cells} does not divide patch {args.patch_size}")
    cell = args.patch_size // cells
    for name, extent in (("stride", stride), ("image height", h), ("image width", w)):
        if extent % cell != 0:
            raise ValueError(f"{name} {extent} is not a multiple of the encoder cell {cell}")
    acc = np.zeros((h // cell, w // cell, dim), dtype=np.float64)
    cnt = np.zeros((h // cell, w // cell, 1), dtype=np.float64)
    for y in tiling.tile_starts(h, args.patch_size, stride):
        for x in tiling.tile_starts(w, args.patch_size, stride):
            enc = first if (y == 0 and x == 0) else models.encode_patch(
                model, image[y : y + args.patch_size, x : x + args.patch_size]
            )
            gy, gx = y // cell, x // cell
            acc[gy : gy + cells, gx : gx + cells] += enc
            cnt[gy : gy + cells, gx : gx + cells] += 1.0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / f"{Path(args.image).stem}.sprt"
    formats.write_tensor(target, (acc / cnt).astype(np.float32))
    print(f"wrote {target}")
    return 0


def run_predict(args, image: np.ndarray) -> int:
    model = models.load_model(args.model)
    image_id, positives, negatives = formats.read_prompts(args.prompts)
    h, w = image.shape[:2]
    patch = min(args.patch_size, h, w)
    stride = max(int(patch * (1.0 - args.overlap_ratio)), 1)
    origins, groups = tiling.assign_groups(
        positives, negatives, (h, w), patch, stride, args.negatives
    )
    out_dir = Path(args.out) / image_id
    out_dir.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    for group in groups:
        oy, ox = origins[group.patch_id]
        local_pos = (group.positive[0] - oy, group.positive[1] - ox)
        local_negs = [(r - oy, c - ox) for r, c in group.negatives]
        in_patch = all(0 <= r < patch and 0 <= c < patch for r, c in [local_pos, *local_negs])
        if not in_patch:
            log.warning("group %d/%d: prompt outside patch, skipped", group.patch_id, group.index_in_patch)
            skipped += 1
            continue
        view = image[oy : oy + patch, ox : ox + patch]
        mask, score = models.segment_group(model, view, local_pos, local_negs)
        if not mask.any() or not mask[local_pos]:
            log.warning(
                "group %d/%d: mask empty or missing its positive, skipped",
                group.patch_id, group.index_in_patch,
            )
            skipped += 1
            continue
        formats.write_mask(out_dir / f"mask_{group.patch_id}_{group.index_in_patch}.bin", mask, score)
        written += 1
    print(f"wrote {written} masks to {out_dir} ({skipped} skipped)")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    if args.mode == "predict" and not args.prompts:
        print("error: --prompts is required in predict mode", file=sys.stderr)
        return 1
    try:
        with Image.open(args.image) as img:
            image = np.asarray(img.convert("RGB"))
        if args.mode == "embed":
            return run_embed(args, image)
        return run_predict(args, image)
    except models.CheckpointMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("adapter run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
