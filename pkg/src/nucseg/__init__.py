"""Training-free nuclear instance segmentation.

Stain-prior self-reference masks, prototype-based partial optimal transport
with a progressive mass scan, activation-derived point prompts, pluggable
patch-level mask prediction, containment-aware soft NMS, and the full
instance-segmentation evaluation suite.
"""

from .config import PipelineConfig
from .errors import ConfigError, PipelineError
from .features import ColorMomentProvider, FeatureGrid, PrototypeSet, encode_stitched, extract_prototypes
from .metrics import EvalReport, aji, dice, evaluate, greedy_match, panoptic
from .ot import SolverConfig, TransportPlan, cosine_cost, pot_scan, sinkhorn_balanced, solve_partial
from .postprocess import NmsConfig, containment_soft_nms, count_contained, unified_scores
from .predictor import InstanceSet, PatchLayout, RegionGrowPredictor, merge_overlapped
from .prompting import (
    ActivationStack,
    PromptSet,
    aggregate_and_binarize,
    merge_stop_probe,
    negative_points,
    positive_points,
    reweight_and_project,
)
from .stain import StainMatrix, StainMaps, deconvolve, high_confidence_masks, otsu_threshold, to_optical_density

__version__ = "0.1.0"

__all__ = [
    "ActivationStack",
    "ColorMomentProvider",
    "ConfigError",
    "EvalReport",
    "FeatureGrid",
    "InstanceSet",
    "NmsConfig",
    "PatchLayout",
    "PipelineConfig",
    "PipelineError",
    "PromptSet",
    "PrototypeSet",
    "RegionGrowPredictor",
    "SolverConfig",
    "StainMatrix",
    "StainMaps",
    "TransportPlan",
    "aggregate_and_binarize",
    "aji",
    "containment_soft_nms",
    "cosine_cost",
    "count_contained",
    "deconvolve",
    "dice",
    "encode_stitched",
    "evaluate",
    "extract_prototypes",
    "greedy_match",
    "high_confidence_masks",
    "merge_overlapped",
    "merge_stop_probe",
    "negative_points",
    "otsu_threshold",
    "panoptic",
    "positive_points",
    "pot_scan",
    "reweight_and_project",
    "sinkhorn_balanced",
    "solve_partial",
    "to_optical_density",
    "unified_scores",
]
