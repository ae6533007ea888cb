"""Toy online self-training flow: a nearest-prototype pixel classifier, a
momentum (EMA) copy that generates pseudo masks, hierarchical calibration
of those masks, resize/crop/flip augmentation, a Hungarian-matched set
loss, and one joint supervised + self-training update step.

The parameter update is a prototype-averaging coordinate step rather than
backpropagation: prototypes move toward the mean feature of pixels
assigned to each category in the matched masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .core import (
    BinaryMask,
    CategoryDistribution,
    CentroidStore,
    FeatureMap,
    PseudoMask,
    PseudoMaskSet,
    stable_softmax,
)
from .hmc import CalibratedMask, HmcConfig, calibrate_mask_set, init_centroids, update_centroids
from .metrics import MatchResult, PqReport, compute_pq, match_segments, resolve_overlaps
from .superpixel import SlicConfig, SuperpixelCache
from .synth import Scene

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

_LOG_FLOOR = 1e-7


@dataclass(frozen=True, eq=False)
class PrototypeModel:
    """Nearest-prototype pixel classifier.

    Prediction assigns each pixel the category minimizing L1 distance to
    its prototype minus the category bias; segments are the 4-connected
    components of each predicted category.
    """

    prototypes: np.ndarray
    bias: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        p = np.asarray(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or min(p.shape) < 1:
            raise ValueError("prototypes must be a (C,E) matrix")
        b = self.bias
        b = np.zeros(p.shape[0], dtype=np.float64) if b is None else np.asarray(b, np.float64)
        if b.shape != (p.shape[0],):
            raise ValueError("bias must have one entry per category")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "prototypes", p.copy())
        object.__setattr__(self, "bias", b.copy())
        self.prototypes.setflags(write=False)
        self.bias.setflags(write=False)

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0]

    @property
    def channels(self) -> int:
        return self.prototypes.shape[1]

    def pixel_scores(self, f: FeatureMap) -> np.ndarray:
        """Per-pixel adjusted distances, shape (C,H,W); lower is better."""
        feats = f.values.astype(np.float64)
        scores = np.empty((self.num_categories, f.height, f.width))
        for c in range(self.num_categories):
            d = np.abs(feats - self.prototypes[c][:, None, None]).sum(axis=0)
            scores[c] = d - self.bias[c]
        return scores

    def predict(self, f: FeatureMap) -> PseudoMaskSet:
        """Segment the feature grid into per-component pseudo masks."""
        scores = self.pixel_scores(f)
        assignment = np.argmin(scores, axis=0)
        masks = []
        for c in range(self.num_categories):
            marked, n = ndimage.label(assignment == c, structure=_CROSS)
            for k in range(1, n + 1):
                bits = marked == k
                mean_scores = scores[:, bits].mean(axis=1)
                dist = CategoryDistribution(stable_softmax(-mean_scores))
                masks.append(PseudoMask(dist.argmax(), dist, BinaryMask(bits)))
        return PseudoMaskSet(tuple(masks))


@dataclass(frozen=True, eq=False)
class MomentumModel:
    """EMA copy of the classifier parameters; updated only via
    :func:`ema_update_params`."""

    params: PrototypeModel
    gamma: float = 0.999

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0,1)")

    def predict(self, f: FeatureMap) -> PseudoMaskSet:
        return self.params.predict(f)


def ema_update_params(m: MomentumModel, current: PrototypeModel) -> MomentumModel:
    """Elementwise EMA: theta_m <- gamma * theta_m + (1 - gamma) * theta."""
    if m.params.prototypes.shape != current.prototypes.shape:
        raise ValueError("momentum and current parameter shapes disagree")
    g = m.gamma
    return MomentumModel(
        PrototypeModel(
            g * m.params.prototypes + (1.0 - g) * current.prototypes,
            g * m.params.bias + (1.0 - g) * current.bias,
        ),
        g,
    )


@dataclass(frozen=True)
class AugmentSpec:
    """One sampled augmentation: nearest-neighbor resize by ``scale``,
    crop (top, left, height, width) in scaled coordinates, optional
    horizontal flip."""

    scale: float = 1.0
    crop: Optional[tuple[int, int, int, int]] = None
    hflip: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling distribution for augmentations."""

    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    crop_ratio: float = 0.8
    flip_prob: float = 0.5

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ValueError("crop_ratio must lie in (0,1]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0,1]")


def sample_augment(
    cfg: AugmentConfig, height: int, width: int, rng: np.random.Generator
) -> AugmentSpec:
    scale = float(cfg.scales[rng.integers(0, len(cfg.scales))])
    sh, sw = _scaled_dims(height, width, scale)
    ch = max(1, round(cfg.crop_ratio * sh))
    cw = max(1, round(cfg.crop_ratio * sw))
    top = int(rng.integers(0, sh - ch + 1))
    left = int(rng.integers(0, sw - cw + 1))
    hflip = bool(rng.random() < cfg.flip_prob)
    return AugmentSpec(scale, (top, left, ch, cw), hflip)


def _scaled_dims(height: int, width: int, scale: float) -> tuple[int, int]:
    return max(1, round(height * scale)), max(1, round(width * scale))


def _resize_indices(n_out: int, n_in: int, scale: float) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) / scale).astype(int)
    return np.clip(idx, 0, n_in - 1)


def apply_augment(
    x: FeatureMap, labels: PseudoMaskSet, spec: AugmentSpec
) -> tuple[FeatureMap, PseudoMaskSet]:
    """Apply one augmentation to features and masks with identical geometry.

    Features are resampled nearest-neighbor; masks emptied by the crop are
    removed from the set.
    """
    h, w = x.height, x.width
    sh, sw = _scaled_dims(h, w, spec.scale)
    crop = spec.crop if spec.crop is not None else (0, 0, sh, sw)
    top, left, ch, cw = crop
    if ch < 1 or cw < 1 or top < 0 or left < 0 or top + ch > sh or left + cw > sw:
        raise ValueError(f"crop {crop} does not fit the scaled {sh}x{sw} grid")

    ri = _resize_indices(sh, h, spec.scale)[top : top + ch]
    ci = _resize_indices(sw, w, spec.scale)[left : left + cw]
    if spec.hflip:
        ci = ci[::-1]

    values = x.values[:, ri[:, None], ci[None, :]]
    out_masks = []
    for pm in labels:
        bits = pm.mask.bits[ri[:, None], ci[None, :]]
        if bits.any():
            out_masks.append(PseudoMask(pm.category, pm.dist, BinaryMask(bits)))
    return FeatureMap(values), PseudoMaskSet(tuple(out_masks))


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment over min(K1,K2) pairs.

    Rectangular matrices are allowed (equivalent to padding the short side
    with a large constant); an empty matrix yields an empty assignment.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    if c.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost entries must be finite")
    rows, cols = linear_sum_assignment(c)
    return sorted(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class LossBreakdown:
    """Set-loss components; total = category_term + mask_term."""

    matching_cost: float
    category_term: float
    mask_term: float

    @property
    def total(self) -> float:
        return self.category_term + self.mask_term


def _pairwise_iou(pred: PseudoMaskSet, target: PseudoMaskSet) -> np.ndarray:
    a = np.stack([pm.mask.bits.ravel() for pm in pred]).astype(np.float64)
    b = np.stack([tm.mask.bits.ravel() for tm in target]).astype(np.float64)
    inter = a @ b.T
    union = a.sum(axis=1)[:, None] + b.sum(axis=1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _toy_loss_matched(
    pred: PseudoMaskSet, target: PseudoMaskSet
) -> tuple[LossBreakdown, list[tuple[int, int]]]:
    if len(pred) and len(target) and pred.num_categories != target.num_categories:
        raise ValueError("prediction and target category counts disagree")
    k_pred, k_gt = len(pred), len(target)
    if k_gt == 0:
        return LossBreakdown(0.0, 0.0, 0.0), []
    if k_pred:
        ious = _pairwise_iou(pred, target)
        probs = np.stack([pm.dist.probs for pm in pred])
        target_cats = np.array([tm.category for tm in target])
        cost = (1.0 - probs[:, target_cats]) + (1.0 - ious)
    else:
        cost = np.zeros((0, k_gt), dtype=np.float64)
    matches = hungarian_match(cost)
    cat_sum = 0.0
    mask_sum = 0.0
    match_cost = 0.0
    for i, j in matches:
        p = max(float(pred.masks[i].dist.probs[target.masks[j].category]), _LOG_FLOOR)
        cat_sum += -np.log(p)
        mask_sum += 1.0 - ious[i, j]
        match_cost += cost[i, j]
    n_unmatched = k_gt - len(matches)
    cat_sum += n_unmatched * -np.log(_LOG_FLOOR)
    mask_sum += n_unmatched * 1.0
    return (
        LossBreakdown(match_cost, cat_sum / k_gt, mask_sum / k_gt),
        matches,
    )


def toy_loss(pred: PseudoMaskSet, target: PseudoMaskSet) -> LossBreakdown:
    """Hungarian-matched set loss.

    Pairwise cost is (1 - predicted probability of the target category)
    plus (1 - IoU). The category term averages the negative log matched
    target-category probability (floored at 1e-7) and the mask term
    averages 1 - IoU, both over the target count; each unmatched target
    contributes the maximal per-pair penalty.
    """
    loss, _ = _toy_loss_matched(pred, target)
    return loss


@dataclass(frozen=True)
class LabeledSample:
    """Source-domain sample: features with ground-truth masks."""

    features: FeatureMap
    masks: PseudoMaskSet


@dataclass(frozen=True)
class UnlabeledSample:
    """Target-domain sample: color image (for superpixels) and features."""

    image: FeatureMap
    features: FeatureMap


@dataclass(frozen=True)
class AdaptConfig:
    """One self-training step's knobs."""

    eta: float = 0.1
    hmc: HmcConfig = field(default_factory=HmcConfig)
    slic: SlicConfig = field(default_factory=SlicConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    group_centroids_by_raw: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0,1]")


def _one_hot(category: int, num_categories: int) -> CategoryDistribution:
    p = np.zeros(num_categories, dtype=np.float64)
    p[category] = 1.0
    return CategoryDistribution(p)


def calibrated_to_pseudo(
    calibrated: Sequence[CalibratedMask], num_categories: int
) -> PseudoMaskSet:
    """Non-dropped calibrated masks as one-hot pseudo masks."""
    masks = tuple(
        PseudoMask(cm.corrected_category, _one_hot(cm.corrected_category, num_categories),
                   cm.corrected_mask)
        for cm in calibrated
        if not cm.dropped
    )
    return PseudoMaskSet(masks)


def adapt_step(
    model: PrototypeModel,
    momentum: MomentumModel,
    source_batch: Sequence[LabeledSample],
    target_batch: Sequence[UnlabeledSample],
    store: CentroidStore,
    cfg: AdaptConfig,
    rng: np.random.Generator,
    cache: Optional[SuperpixelCache] = None,
) -> tuple[PrototypeModel, MomentumModel, CentroidStore, tuple[LossBreakdown, LossBreakdown]]:
    """One joint supervised + self-training step.

    Sequence: momentum predicts on raw target images; calibration corrects
    the pseudo masks; centroids EMA-update from the calibrated (or raw)
    masks; augmentation transforms image and masks; prototypes take one
    averaging step toward the matched masks' pixels; the momentum model is
    refreshed last. Returns the supervised and self-training losses of the
    pre-update model.
    """
    num_categories = model.num_categories

    calibrated_sets: list[tuple[UnlabeledSample, tuple[CalibratedMask, ...]]] = []
    for sample in target_batch:
        raw = momentum.predict(sample.features)
        calibrated = calibrate_mask_set(
            raw, sample.features, sample.image, store, cfg.hmc,
            slic=cfg.slic, cache=cache,
        )
        calibrated_sets.append((sample, calibrated))

    update_pairs: list[tuple[PseudoMask, FeatureMap]] = []
    for sample, calibrated in calibrated_sets:
        for cm in calibrated:
            if cm.dropped:
                continue
            group = cm.original.category if cfg.group_centroids_by_raw else cm.corrected_category
            update_pairs.append(
                (PseudoMask(group, _one_hot(group, num_categories), cm.corrected_mask),
                 sample.features)
            )
    if update_pairs:
        store = update_centroids(store, update_pairs)

    pixel_sums = np.zeros((num_categories, model.channels), dtype=np.float64)
    pixel_counts = np.zeros(num_categories, dtype=np.int64)

    def accumulate(matches, target_set: PseudoMaskSet, feats: FeatureMap) -> None:
        grid = feats.values.astype(np.float64)
        for _, j in matches:
            tm = target_set.masks[j]
            pixel_sums[tm.category] += grid[:, tm.mask.bits].sum(axis=1)
            pixel_counts[tm.category] += tm.mask.area

    sup_losses = []
    for sample in source_batch:
        pred = model.predict(sample.features)
        loss, matches = _toy_loss_matched(pred, sample.masks)
        sup_losses.append(loss)
        accumulate(matches, sample.masks, sample.features)

    self_losses = []
    for sample, calibrated in calibrated_sets:
        targets = calibrated_to_pseudo(calibrated, num_categories)
        spec = sample_augment(cfg.augment, sample.features.height, sample.features.width, rng)
        x_aug, y_aug = apply_augment(sample.features, targets, spec)
        pred = model.predict(x_aug)
        loss, matches = _toy_loss_matched(pred, y_aug)
        self_losses.append(loss)
        accumulate(matches, y_aug, x_aug)

    new_prototypes = model.prototypes.copy()
    if cfg.eta > 0:
        for c in range(num_categories):
            if pixel_counts[c] > 0:
                mean = pixel_sums[c] / pixel_counts[c]
                new_prototypes[c] = (1.0 - cfg.eta) * new_prototypes[c] + cfg.eta * mean
    new_model = PrototypeModel(new_prototypes, model.bias)
    new_momentum = ema_update_params(momentum, new_model)
    return new_model, new_momentum, store, (_mean_loss(sup_losses), _mean_loss(self_losses))


def _mean_loss(losses: Sequence[LossBreakdown]) -> LossBreakdown:
    if not losses:
        return LossBreakdown(0.0, 0.0, 0.0)
    return LossBreakdown(
        float(np.mean([l.matching_cost for l in losses])),
        float(np.mean([l.category_term for l in losses])),
        float(np.mean([l.mask_term for l in losses])),
    )


def gt_mask_set(scene: Scene) -> PseudoMaskSet:
    """Ground-truth segments as one-hot pseudo masks."""
    masks = tuple(
        PseudoMask(seg.category, _one_hot(seg.category, scene.num_categories), seg.mask)
        for seg in scene.gt.segments()
    )
    return PseudoMaskSet(masks)


def fit_source_prototypes(scenes: Sequence[Scene], num_categories: int) -> PrototypeModel:
    """Baseline supervised fit: each prototype is the mean source feature of
    its category; categories absent from the sources get a large negative
    bias so they never win a pixel."""
    if not scenes:
        raise ValueError("source prototype fit needs at least one scene")
    channels = scenes[0].features.channels
    sums = np.zeros((num_categories, channels), dtype=np.float64)
    counts = np.zeros(num_categories, dtype=np.int64)
    for scene in scenes:
        feats = scene.features.values.astype(np.float64)
        for c in range(num_categories):
            sel = scene.gt.category == c
            if np.any(sel):
                sums[c] += feats[:, sel].sum(axis=1)
                counts[c] += int(sel.sum())
    prototypes = np.zeros_like(sums)
    bias = np.zeros(num_categories, dtype=np.float64)
    present = counts > 0
    prototypes[present] = sums[present] / counts[present, None]
    bias[~present] = -1e6
    return PrototypeModel(prototypes, bias)


def evaluate_model(
    model: PrototypeModel, scenes: Sequence[Scene], num_categories: int
) -> PqReport:
    """Aggregate PQ of the model's resolved predictions over scenes."""
    matches: list[MatchResult] = []
    for scene in scenes:
        pred = model.predict(scene.features)
        label = resolve_overlaps(list(pred), scene.features.height, scene.features.width)
        matches.append(match_segments(label, scene.gt))
    return compute_pq(matches, num_categories)


@dataclass
class SelfTrainResult:
    model: PrototypeModel
    momentum: MomentumModel
    store: CentroidStore
    history: list[dict]


def run_self_training(
    source_scenes: Sequence[Scene],
    target_scenes: Sequence[Scene],
    *,
    steps: int,
    cfg: AdaptConfig,
    gamma: float = 0.999,
    gamma_prime: float = 0.9,
    seed: int = 0,
    source_per_step: int = 1,
    target_per_step: int = 1,
    log_every: int = 0,
) -> SelfTrainResult:
    """Full toy flow: source-fit baseline, centroid init from the baseline's
    target predictions, then ``steps`` rounds of :func:`adapt_step` over
    round-robin batches."""
    if not source_scenes:
        raise ValueError("self-training needs source scenes")
    num_categories = source_scenes[0].num_categories
    model = fit_source_prototypes(source_scenes, num_categories)
    momentum = MomentumModel(model, gamma)

    init_pairs: list[tuple[PseudoMask, FeatureMap]] = []
    for scene in target_scenes:
        for pm in momentum.predict(scene.features):
            init_pairs.append((pm, scene.features))
    store = init_centroids(
        init_pairs, num_categories, source_scenes[0].features.channels, gamma_prime
    )

    source_samples = [LabeledSample(s.features, gt_mask_set(s)) for s in source_scenes]
    target_samples = [UnlabeledSample(s.image, s.features) for s in target_scenes]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5E1F))))
    cache = SuperpixelCache()

    history: list[dict] = []
    for step in range(steps):
        src = (
            [source_samples[(step * source_per_step + i) % len(source_samples)]
             for i in range(source_per_step)]
            if source_samples else []
        )
        tgt = (
            [target_samples[(step * target_per_step + i) % len(target_samples)]
             for i in range(target_per_step)]
            if target_samples else []
        )
        model, momentum, store, (sup, self_) = adapt_step(
            model, momentum, src, tgt, store, cfg, rng, cache
        )
        if log_every and (step % log_every == 0 or step == steps - 1):
            history.append(
                {
                    "step": step,
                    "loss_sup": sup.total,
                    "loss_self": self_.total,
                    "sup_category": sup.category_term,
                    "sup_mask": sup.mask_term,
                    "self_category": self_.category_term,
                    "self_mask": self_.mask_term,
                }
            )
    return SelfTrainResult(model, momentum, store, history)
