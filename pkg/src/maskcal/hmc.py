"""Hierarchical mask calibration: region-wise category correction,
centroid maintenance, superpixel-wise mask expansion and pixel-wise voting,
composed coarse-to-fine (region -> superpixel -> pixel by default; the
stage order is configurable, including subsets for ablations).

Calibration of distinct masks is pure and reads one immutable centroid
snapshot; centroid updates are the caller's responsibility and return new
stores.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    BinaryMask,
    CentroidStore,
    FeatureMap,
    PseudoMask,
    PseudoMaskSet,
    mask_pooled_vector,
)
from .superpixel import SlicConfig, SuperpixelCache, SuperpixelMap, compute_superpixels

POLICY_NEUTRAL = "neutral"
POLICY_EXCLUDE = "exclude"


class Stage(enum.Enum):
    REGION = "R"
    SUPERPIXEL = "S"
    PIXEL = "P"


def parse_stage_order(text: str) -> tuple[Stage, ...]:
    """Parse an order string like ``"RSP"`` or ``"P"``; ``"none"`` is empty."""
    if text.lower() in ("", "none"):
        return ()
    stages = []
    for ch in text.upper():
        try:
            stages.append(Stage(ch))
        except ValueError:
            raise ValueError(f"unknown calibration stage {ch!r} (expected R, S or P)")
    return tuple(stages)


def format_stage_order(order: Sequence[Stage]) -> str:
    return "".join(s.value for s in order) if order else "none"


@dataclass(frozen=True)
class HmcConfig:
    """Calibration parameters.

    ``overlap_ratio_threshold`` is the fraction of a superpixel that the
    mask must cover before expansion includes it (0 means any overlap).
    ``vote_majority`` is the consistent-pixel fraction required to keep a
    superpixel during voting. ``temperature`` scales the distance softmax.
    ``invalid_centroid_policy`` decides how categories without a centroid
    are weighted: ``neutral`` gives them the mean weight of valid
    categories, ``exclude`` gives them zero.
    """

    stage_order: tuple[Stage, ...] = (Stage.REGION, Stage.SUPERPIXEL, Stage.PIXEL)
    overlap_ratio_threshold: float = 0.0
    vote_majority: float = 0.5
    temperature: float = 1.0
    invalid_centroid_policy: str = POLICY_NEUTRAL

    def __post_init__(self):
        order = tuple(self.stage_order)
        if len(set(order)) != len(order):
            raise ValueError("stage_order must not repeat stages")
        if not 0.0 <= self.overlap_ratio_threshold < 1.0:
            raise ValueError("overlap_ratio_threshold must lie in [0,1)")
        if not 0.0 < self.vote_majority <= 1.0:
            raise ValueError("vote_majority must lie in (0,1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.invalid_centroid_policy not in (POLICY_NEUTRAL, POLICY_EXCLUDE):
            raise ValueError(f"unknown policy {self.invalid_centroid_policy!r}")
        object.__setattr__(self, "stage_order", order)


@dataclass(frozen=True, eq=False)
class CalibratedMask:
    """A pseudo mask after calibration: corrected category and geometry.

    ``dropped`` marks masks emptied by calibration; dropped masks carry an
    empty corrected mask and should be excluded from centroid updates.
    """

    original: PseudoMask
    corrected_category: int
    corrected_mask: BinaryMask
    dropped: bool

    def __post_init__(self):
        if self.dropped != self.corrected_mask.is_empty():
            raise ValueError("dropped must mark exactly the emptied masks")


def calibration_weights(v: np.ndarray, store: CentroidStore, cfg: HmcConfig) -> np.ndarray:
    """Per-category reweighting from centroid distances.

    Weights are softmax(-L1(v, centroid)/temperature) over valid
    categories; invalid categories get the mean valid weight (``neutral``)
    or zero (``exclude``); the result is renormalized to sum 1.
    """
    v = np.asarray(v, dtype=np.float64)
    n_valid = store.num_valid()
    if n_valid == 0:
        raise ValueError("calibration requires at least one valid centroid")
    dists = np.abs(v[None, :] - store.centroids).sum(axis=1)
    scores = -dists[store.valid] / cfg.temperature
    shifted = np.exp(scores - scores.max())
    valid_w = shifted / shifted.sum()
    w = np.zeros(store.num_categories, dtype=np.float64)
    w[store.valid] = valid_w
    if cfg.invalid_centroid_policy == POLICY_NEUTRAL:
        w[~store.valid] = valid_w.sum() / n_valid
    return w / w.sum()


def calibrate_region(
    pm: PseudoMask,
    f: FeatureMap,
    store: CentroidStore,
    cfg: HmcConfig,
    mask: Optional[BinaryMask] = None,
) -> int:
    """Corrected category: argmax of weight * probability, ties toward the
    lower index. ``mask`` overrides the pooled region (used when region
    calibration runs after a geometry stage)."""
    region = pm.mask if mask is None else mask
    v = mask_pooled_vector(f, region)
    w = calibration_weights(v, store, cfg)
    return int(np.argmax(w * pm.dist.probs))


def init_centroids(
    predictions: Sequence[tuple[PseudoMask, FeatureMap]],
    num_categories: int,
    channels: int,
    gamma_prime: float = 0.9,
) -> CentroidStore:
    """Initialize centroids as the mean region vector per predicted category.

    Categories with no predictions are flagged invalid. An empty prediction
    sequence yields an all-invalid store.
    """
    sums = np.zeros((num_categories, channels), dtype=np.float64)
    counts = np.zeros(num_categories, dtype=np.int64)
    for pm, f in predictions:
        if not 0 <= pm.category < num_categories:
            raise ValueError(f"prediction category {pm.category} out of range")
        v = mask_pooled_vector(f, pm.mask)
        if v.shape[0] != channels:
            raise ValueError("prediction feature channels disagree with the store")
        sums[pm.category] += v
        counts[pm.category] += 1
    valid = counts > 0
    centroids = np.zeros_like(sums)
    centroids[valid] = sums[valid] / counts[valid, None]
    return CentroidStore(centroids, valid, gamma_prime)


def update_centroids(
    store: CentroidStore, batch: Sequence[tuple[PseudoMask, FeatureMap]]
) -> CentroidStore:
    """EMA centroid update from one batch, grouped by each mask's category.

    Present categories move by gamma' * old + (1-gamma') * batch_mean;
    absent categories are unchanged; invalid categories with batch masks
    become valid at the batch mean. Callers pick the grouping category by
    what they pass in (calibrated by default, raw for ablations).
    """
    c, e = store.num_categories, store.channels
    sums = np.zeros((c, e), dtype=np.float64)
    counts = np.zeros(c, dtype=np.int64)
    for pm, f in batch:
        if not 0 <= pm.category < c:
            raise ValueError(f"batch category {pm.category} out of range")
        sums[pm.category] += mask_pooled_vector(f, pm.mask)
        counts[pm.category] += 1
    present = counts > 0
    batch_mean = np.zeros_like(sums)
    batch_mean[present] = sums[present] / counts[present, None]
    g = store.gamma_prime
    centroids = store.centroids.copy()
    valid = store.valid.copy()
    fresh = present & ~valid
    tracked = present & valid
    centroids[tracked] = g * centroids[tracked] + (1.0 - g) * batch_mean[tracked]
    centroids[fresh] = batch_mean[fresh]
    valid |= present
    return CentroidStore(centroids, valid, g)


def expand_mask_superpixels(m: BinaryMask, sp: SuperpixelMap, rho: float = 0.0) -> BinaryMask:
    """Union of all superpixels whose overlap with the mask exceeds
    ``rho`` times their size (rho=0 keeps any overlapped superpixel)."""
    if (m.height, m.width) != (sp.height, sp.width):
        raise ValueError("mask and superpixel dims disagree")
    overlap = np.bincount(sp.labels[m.bits], minlength=sp.count)
    keep = overlap > rho * sp.sizes()
    return BinaryMask(keep[sp.labels])


def vote_map(f: FeatureMap, store: CentroidStore) -> np.ndarray:
    """Per-pixel nearest-valid-centroid category (L1 distance, ties toward
    the lower category index)."""
    if store.num_valid() == 0:
        raise ValueError("voting requires at least one valid centroid")
    if store.channels != f.channels:
        raise ValueError("feature channels disagree with the centroid store")
    valid_ids = np.nonzero(store.valid)[0]
    feats = f.values.astype(np.float64)
    dists = np.empty((len(valid_ids), f.height, f.width), dtype=np.float64)
    for i, c in enumerate(valid_ids):
        dists[i] = np.abs(feats - store.centroids[c][:, None, None]).sum(axis=0)
    return valid_ids[np.argmin(dists, axis=0)]


def pixel_vote_filter(
    m_sp: BinaryMask,
    sp: SuperpixelMap,
    f: FeatureMap,
    store: CentroidStore,
    corrected_category: int,
    cfg: HmcConfig,
    votes: Optional[np.ndarray] = None,
) -> BinaryMask:
    """Discard superpixel cells whose pixels mostly vote against the mask's
    corrected category.

    Votes are nearest-valid-centroid categories. Each overlapped cell
    (mask intersected with one superpixel; the whole superpixel when the
    mask is a union of superpixels) is kept iff the fraction of its pixels
    voting ``corrected_category`` reaches ``vote_majority``. The output is
    always a subset of the input mask.
    """
    if (m_sp.height, m_sp.width) != (sp.height, sp.width):
        raise ValueError("mask and superpixel dims disagree")
    if not 0 <= corrected_category < store.num_categories:
        raise ValueError(f"category {corrected_category} out of range")
    if m_sp.is_empty():
        return m_sp
    if votes is None:
        votes = vote_map(f, store)
    totals = np.bincount(sp.labels[m_sp.bits], minlength=sp.count)
    consistent = np.bincount(
        sp.labels[m_sp.bits & (votes == corrected_category)], minlength=sp.count
    )
    covered = totals > 0
    keep = np.zeros(sp.count, dtype=bool)
    keep[covered] = consistent[covered] / totals[covered] >= cfg.vote_majority
    return BinaryMask(keep[sp.labels] & m_sp.bits)


def calibrate_mask_set(
    ms: PseudoMaskSet,
    f: FeatureMap,
    image: Optional[FeatureMap],
    store: CentroidStore,
    cfg: HmcConfig,
    *,
    slic: Optional[SlicConfig] = None,
    superpixels: Optional[SuperpixelMap] = None,
    cache: Optional[SuperpixelCache] = None,
) -> tuple[CalibratedMask, ...]:
    """Run the configured calibration stages over every mask independently.

    Superpixels are computed once per image (or taken precomputed /
    cached) and shared across masks; masks emptied by any stage are marked
    dropped and skip the remaining stages. Things and stuff masks are
    treated uniformly.
    """
    if len(ms) == 0:
        return ()
    needs_sp = Stage.SUPERPIXEL in cfg.stage_order or Stage.PIXEL in cfg.stage_order
    sp = superpixels
    if needs_sp and sp is None:
        if image is None:
            raise ValueError("superpixel stages need an image or a precomputed map")
        slic_cfg = slic or SlicConfig()
        if cache is not None:
            sp = cache.get(image, slic_cfg)
        else:
            sp = compute_superpixels(image, slic_cfg)
    if needs_sp and (sp.height, sp.width) != (f.height, f.width):
        raise ValueError("superpixel and feature dims disagree")

    votes = vote_map(f, store) if Stage.PIXEL in cfg.stage_order else None

    out = []
    for pm in ms:
        category = pm.category
        mask = pm.mask
        for stage in cfg.stage_order:
            if mask.is_empty():
                break
            if stage is Stage.REGION:
                category = calibrate_region(pm, f, store, cfg, mask=mask)
            elif stage is Stage.SUPERPIXEL:
                mask = expand_mask_superpixels(mask, sp, cfg.overlap_ratio_threshold)
            else:
                mask = pixel_vote_filter(mask, sp, f, store, category, cfg, votes)
        out.append(
            CalibratedMask(
                original=pm,
                corrected_category=category,
                corrected_mask=mask,
                dropped=mask.is_empty(),
            )
        )
    return tuple(out)
