"""maskcal: hierarchical calibration of panoptic pseudo masks.

Region-wise category correction, superpixel-wise mask expansion and
pixel-wise voting over predicted masks, plus SLIC superpixels, panoptic
quality evaluation, synthetic two-domain scenes and a toy online
self-training loop.
"""

from .core import (
    NO_INSTANCE,
    VOID,
    BinaryMask,
    CategoryDistribution,
    CentroidStore,
    FeatureMap,
    PanopticLabel,
    PseudoMask,
    PseudoMaskSet,
    Segment,
    l1_distance,
    mask_pooled_vector,
    softmax,
)
from .hmc import (
    CalibratedMask,
    HmcConfig,
    Stage,
    calibrate_mask_set,
    calibrate_region,
    calibration_weights,
    expand_mask_superpixels,
    init_centroids,
    parse_stage_order,
    pixel_vote_filter,
    update_centroids,
)
from .metrics import (
    MatchResult,
    PqReport,
    compute_pq,
    iou,
    match_segments,
    resolve_overlaps,
)
from .superpixel import (
    SlicConfig,
    SuperpixelCache,
    SuperpixelMap,
    compute_superpixels,
    enforce_connectivity,
    overlap_areas,
)
from .synth import Scene, SceneConfig, generate_scene, perturb_predictions

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "CalibratedMask",
    "CategoryDistribution",
    "CentroidStore",
    "FeatureMap",
    "HmcConfig",
    "MatchResult",
    "NO_INSTANCE",
    "PanopticLabel",
    "PqReport",
    "PseudoMask",
    "PseudoMaskSet",
    "Scene",
    "SceneConfig",
    "Segment",
    "SlicConfig",
    "Stage",
    "SuperpixelCache",
    "SuperpixelMap",
    "VOID",
    "calibrate_mask_set",
    "calibrate_region",
    "calibration_weights",
    "compute_pq",
    "compute_superpixels",
    "enforce_connectivity",
    "expand_mask_superpixels",
    "generate_scene",
    "init_centroids",
    "iou",
    "l1_distance",
    "mask_pooled_vector",
    "match_segments",
    "overlap_areas",
    "parse_stage_order",
    "perturb_predictions",
    "pixel_vote_filter",
    "resolve_overlaps",
    "softmax",
    "update_centroids",
]
