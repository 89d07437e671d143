"""End-to-end orchestration: per-image stages, dataset runs, evaluation.

Stage dataflow is strictly forward (stain -> features -> transport ->
prompting -> prediction -> postprocess); all stage-to-stage handoff happens in
memory, with file I/O only at the image boundary (plus the declared external
inputs: feature tensors and mask files). The ``current_stage`` context
variable marks the active stage so file-access tracing hooks can audit the
acyclic dataflow.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import features, interchange, metrics, ot, postprocess, predictor, prompting, stain
from .config import PipelineConfig
from .errors import ConfigError, PipelineError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

STAGES = ("input", "stain", "features", "transport", "prompting", "prediction", "postprocess", "output")

# Active stage marker; file-access tracing hooks attribute opens to stages
# through it, which is how the acyclic-dataflow integration test audits runs.
current_stage: ContextVar[str] = ContextVar("nucseg_stage", default="idle")


@contextmanager
def _stage(name: str):
    token = current_stage.set(name)
    try:
        yield
    finally:
        current_stage.reset(token)


@dataclass
class ImageResult:
    image_id: str
    prompts: prompting.PromptSet
    labels: np.ndarray
    scores: list
    timing: dict
    activations: np.ndarray | None = None
    notes: list = field(default_factory=list)


def derive_seed(seed: int, image_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _empty_result(image_id, shape, timing, reason) -> ImageResult:
    log.info("%s: %s; emitting empty result", image_id, reason)
    return ImageResult(
        image_id=image_id,
        prompts=prompting.PromptSet(image_id, [], []),
        labels=np.zeros(shape, dtype=np.uint16),
        scores=[],
        timing=timing,
        notes=[reason],
    )


def process_image(image_id: str, rgb: np.ndarray, cfg: PipelineConfig, seed: int) -> ImageResult:
    """Run every stage on one image held in memory."""
    cfg.validate()
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise PipelineError(f"{image_id}: expected an RGB image, got shape {rgb.shape}")
    rgb = rgb[:, :, :3]
    shape = rgb.shape[:2]
    timing: dict[str, float] = {}
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    with _stage("stain"):
        stains = cfg.stain.matrix()
        od = stain.to_optical_density(rgb, stains.reference_intensity)
        maps = stain.deconvolve(od, stains)
        try:
            split = stain.otsu_split_value(maps.s_h, cfg.stain.bins)
            m_fg, m_bg = stain.high_confidence_masks(maps, split, cfg.stain.ratio)
        except ValueError as exc:
            timing["stain"] = time.perf_counter() - t0
            timing["total"] = time.perf_counter() - t_start
            return _empty_result(image_id, shape, timing, f"no stain contrast ({exc})")
    timing["stain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("features"):
        cell = cfg.features.cell
        # feature extraction sees the largest cell-multiple window; the border
        # remainder (< cell px) is recovered when activations resize to H x W
        crop = (shape[0] - shape[0] % cell, shape[1] - shape[1] % cell)
        if cfg.features.external_dir:
            grid = interchange.read_tensor(Path(cfg.features.external_dir) / f"{image_id}.sprt")
            expected = (crop[0] // cell, crop[1] // cell)
            if grid.shape[:2] != expected:
                raise PipelineError(
                    f"{image_id}: external feature grid {grid.shape[:2]} != declared geometry {expected}"
                )
            feats = features.FeatureGrid(
                grid.astype(np.float64), cfg.features.patch_size, cfg.features.stride
            )
        else:
            provider = features.ColorMomentProvider(stains, cell=cell)
            patch = min(cfg.features.patch_size, crop[0], crop[1])
            patch -= patch % cell
            stride = min(cfg.features.stride, patch)
            stride -= stride % cell
            feats = features.encode_stitched(
                rgb[: crop[0], : crop[1]], provider, patch, max(stride, cell)
            )
        grid_fg = features.resize_mask_to_grid(m_fg[: crop[0], : crop[1]], feats.shape)
        grid_bg = features.resize_mask_to_grid(m_bg[: crop[0], : crop[1]], feats.shape)
        for name, gmask in (("fg", grid_fg), ("bg", grid_bg)):
            if gmask.sum() < cfg.features.k:
                timing["features"] = time.perf_counter() - t0
                timing["total"] = time.perf_counter() - t_start
                return _empty_result(
                    image_id, shape, timing, f"too few {name} cells for {cfg.features.k} prototypes"
                )
        protos = features.extract_prototypes(feats, grid_fg, grid_bg, cfg.features.k, seed)
    timing["features"] = time.perf_counter() - t0

    solver = cfg.transport.solver()
    refiner = (
        prompting.GaussianRefiner(cfg.prompting.refiner_sigma)
        if cfg.prompting.refiner == "gaussian"
        else None
    )

    def project(plan, allow_unconverged):
        return prompting.reweight_and_project(
            feats.flattened(),
            plan,
            feats.shape,
            shape,
            protos.class_of,
            refiner=refiner,
            resize_mode=cfg.prompting.resize,
            allow_unconverged=allow_unconverged,
        )

    probe_state = {"prev": 0}

    def probe(plan) -> bool:
        stack = project(plan, allow_unconverged=True)
        try:
            fg_map, _ = prompting.aggregate_and_binarize(stack, cfg.stain.bins)
        except ValueError:
            return False
        fired = prompting.merge_stop_probe(
            fg_map, probe_state["prev"], cfg.prompting.area_cap, cfg.prompting.merge_k
        )
        if not fired:
            probe_state["prev"] = prompting.component_stats(fg_map)[0]
        return fired

    t0 = time.perf_counter()
    with _stage("transport"):
        cost = ot.cosine_cost(feats.flattened(), protos.vectors)
        plan = ot.pot_scan(cost, cfg.transport.rho0, cfg.transport.rho_stride, probe, solver)
    timing["transport"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("prompting"):
        stack = project(plan, allow_unconverged=cfg.run.allow_unconverged)
        fg_map, bg_map = prompting.aggregate_and_binarize(stack, cfg.stain.bins)
        positives = prompting.positive_points(
            fg_map, m_fg, cfg.prompting.min_separation, cfg.prompting.min_region_area
        )
        negatives = prompting.negative_points(
            bg_map, fg_map, cfg.prompting.negative_stride, cfg.prompting.negative_margin
        )
        taken = set(positives)
        negatives = [p for p in negatives if p not in taken]
        prompts = prompting.PromptSet(image_id, positives, negatives)
        prompts.validate_bounds(shape)
    timing["prompting"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("prediction"):
        layout = predictor.PatchLayout(cfg.predictor.patch_size, cfg.predictor.overlap_ratio)
        if cfg.predictor.backend == "file":
            engine = predictor.FilePredictor(cfg.predictor.mask_dir)
        else:
            engine = predictor.RegionGrowPredictor(
                cfg.predictor.drop_frac,
                cfg.predictor.min_seed,
                cfg.predictor.barrier_radius,
                cfg.predictor.expand_frac,
                cfg.predictor.expand_px,
            )
        raw = predictor.predict_instances(
            image_id, rgb, maps.s_h, prompts, layout, engine, cfg.predictor.y_negatives
        )
        merged = predictor.merge_overlapped(raw, cfg.predictor.iou_merge)
    timing["prediction"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("postprocess"):
        nms_cfg = cfg.nms.config()
        scores = postprocess.unified_scores(merged, maps.s_h, cfg.nms.score_mode)
        kept = postprocess.containment_soft_nms(merged, scores, nms_cfg)
        labels, source = postprocess.rasterize(kept, shape)
        final_scores = [
            {"id": lab + 1, "score": float(kept.scores[idx])} for lab, idx in enumerate(source)
        ]
    timing["postprocess"] = time.perf_counter() - t0
    timing["total"] = time.perf_counter() - t_start

    activations = stack.maps if cfg.run.debug_activations else None
    return ImageResult(image_id, prompts, labels, final_scores, timing, activations)


def load_image(path, pre_resize=None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if pre_resize is not None:
            h, w = int(pre_resize[0]), int(pre_resize[1])
            img = img.resize((w, h), Image.LANCZOS)  # Lanczos-3 kernel
        return np.asarray(img)


def run_image(path, cfg: PipelineConfig, out_root) -> Path:
    """Process one image file and write its outputs directory.

    Any stage failure removes the partial outputs and re-raises.
    """
    path = Path(path)
    image_id = path.stem
    out_dir = Path(out_root) / image_id
    try:
        with _stage("input"):
            rgb = load_image(path, cfg.run.pre_resize)
        result = process_image(image_id, rgb, cfg, derive_seed(cfg.run.seed, image_id))
        with _stage("output"):
            out_dir.mkdir(parents=True, exist_ok=True)
            interchange.write_prompts(out_dir / "prompts.json", result.prompts)
            interchange.write_label_map(out_dir / "labels.png", result.labels)
            with open(out_dir / "scores.json", "w") as fh:
                json.dump({"image_id": image_id, "instances": result.scores}, fh, indent=1)
            with open(out_dir / "timing.json", "w") as fh:
                json.dump(result.timing, fh, indent=1)
            cfg.dump(out_dir / "config.resolved")
            if result.activations is not None:
                interchange.write_tensor(out_dir / "activations.sprt", result.activations)
        return out_dir
    except Exception:
        if out_dir.exists():
            shutil.rmtree(out_dir, ignore_errors=True)
        raise


def _run_one(args):
    path, cfg_dict, out_root = args
    cfg = PipelineConfig.from_dict(cfg_dict)
    run_image(path, cfg, out_root)
    return Path(path).stem


def discover_images(input_path) -> list[Path]:
    input_path = Path(input_path)
    if input_path.is_file():
        return [input_path]
    if not input_path.is_dir():
        raise ConfigError(f"input {input_path} does not exist")
    found = sorted(
        p for p in input_path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not found:
        raise ConfigError(f"no images found under {input_path}")
    return found


def run_dataset(
    input_path,
    out_root,
    cfg: PipelineConfig,
    gt_dir=None,
    require_gt: bool = False,
) -> dict:
    """Process a directory (or single file), then evaluate when gt is present."""
    cfg.validate()
    images = discover_images(input_path)
    gt_paths: dict[str, Path] = {}
    if gt_dir is not None:
        gt_root = Path(gt_dir)
        for img in images:
            candidate = gt_root / f"{img.stem}.png"
            if candidate.exists():
                gt_paths[img.stem] = candidate
        missing = [img.stem for img in images if img.stem not in gt_paths]
        if require_gt and missing:
            raise ConfigError(f"missing ground truth for: {', '.join(missing)}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    if cfg.run.workers <= 1:
        for img in images:
            run_image(img, cfg, out_root)
            log.info("processed %s", img.stem)
    else:
        jobs = [(str(img), cfg.to_dict(), str(out_root)) for img in images]
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            for stem in pool.map(_run_one, jobs):
                log.info("processed %s", stem)

    summary: dict = {"images": len(images), "out": str(out_root)}
    if gt_paths:
        reports = {}
        for stem, gt_path in sorted(gt_paths.items()):
            gt_masks = metrics.masks_from_labels(interchange.read_label_map(gt_path))
            pred_masks = metrics.masks_from_labels(
                interchange.read_label_map(out_root / stem / "labels.png")
            )
            report = metrics.evaluate(gt_masks, pred_masks)
            (out_root / stem / "eval.json").write_text(json.dumps(report.to_dict(), indent=1))
            reports[stem] = report
        summary["evaluation"] = metrics.summarize(reports)
    (out_root / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def evaluate_directories(pred_dir, gt_dir) -> dict:
    """Standalone evaluation of predicted label maps against ground truth."""
    gt_root, pred_root = Path(gt_dir), Path(pred_dir)
    gt_files = sorted(gt_root.glob("*.png"))
    if not gt_files:
        raise ConfigError(f"no ground-truth label maps under {gt_root}")
    reports = {}
    for gt_path in gt_files:
        stem = gt_path.stem
        nested = pred_root / stem / "labels.png"
        flat = pred_root / f"{stem}.png"
        pred_path = nested if nested.exists() else flat
        if not pred_path.exists():
            raise ConfigError(f"no prediction for {stem} under {pred_root}")
        reports[stem] = metrics.evaluate(
            metrics.masks_from_labels(interchange.read_label_map(gt_path)),
            metrics.masks_from_labels(interchange.read_label_map(pred_path)),
        )
    return metrics.summarize(reports)
