"""Shared data model: feature grids, binary masks, probability vectors,
category centroids and panoptic label maps, plus the numeric kernels
(masked pooling, L1 distance, stable softmax) the rest of the library
composes.

All types are immutable values after construction; every operation here is a
pure function, so instances are safe to share across threads. Feature
payloads are stored as float32; pooled vectors, centroids and other
accumulations are kept in float64 to bound rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VOID = -1
NO_INSTANCE = -1

POOL_MASK_MEAN = "mask-mean"
POOL_STRICT_GAP = "strict-gap"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense per-pixel feature grid of shape (channels, height, width)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"feature map must be rank 3 (E,H,W), got rank {v.ndim}")
        if min(v.shape) < 1:
            raise ValueError(f"feature map dims must be positive, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def at(self, channel: int, row: int, col: int) -> float:
        return float(self.values[channel, row, col])


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Binary pixel mask; ``area`` caches the number of set bits."""

    bits: np.ndarray
    area: int = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(bool)
        if b.ndim != 2:
            raise ValueError(f"mask must be rank 2 (H,W), got rank {b.ndim}")
        if min(b.shape) < 1:
            raise ValueError(f"mask dims must be positive, got {b.shape}")
        object.__setattr__(self, "bits", _freeze(b))
        object.__setattr__(self, "area", int(b.sum()))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def is_empty(self) -> bool:
        return self.area == 0

    def same_bits(self, other: "BinaryMask") -> bool:
        return self.bits.shape == other.bits.shape and bool(
            np.array_equal(self.bits, other.bits)
        )


@dataclass(frozen=True, eq=False)
class CategoryDistribution:
    """Per-category probability vector; must sum to 1 within 1e-5."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probability vector must be a non-empty 1-d sequence")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-5:
            raise ValueError(f"probabilities must sum to 1, got {float(p.sum()):.7f}")
        object.__setattr__(self, "probs", _freeze(p))

    def __len__(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True, eq=False)
class PseudoMask:
    """One predicted segment: category id, soft distribution and binary mask.

    The category must equal the distribution argmax at creation; it may
    diverge from it only through explicit calibration (see
    :class:`maskcal.hmc.CalibratedMask`).
    """

    category: int
    dist: CategoryDistribution
    mask: BinaryMask

    def __post_init__(self):
        if not 0 <= self.category < len(self.dist):
            raise ValueError(f"category {self.category} out of range [0,{len(self.dist)})")
        if self.category != self.dist.argmax():
            raise ValueError("category must be the distribution argmax at creation")
        if self.mask.is_empty():
            raise ValueError("pseudo mask must be non-empty at creation")


@dataclass(frozen=True, eq=False)
class PseudoMaskSet:
    """A set of pseudo masks sharing one grid; masks may overlap."""

    masks: tuple[PseudoMask, ...]

    def __post_init__(self):
        masks = tuple(self.masks)
        if masks:
            h, w = masks[0].mask.height, masks[0].mask.width
            c = len(masks[0].dist)
            if c < 2:
                raise ValueError("mask sets require at least 2 categories")
            for pm in masks[1:]:
                if (pm.mask.height, pm.mask.width) != (h, w):
                    raise ValueError("all masks in a set must share one grid")
                if len(pm.dist) != c:
                    raise ValueError("all masks in a set must share one category count")
        object.__setattr__(self, "masks", masks)

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    @property
    def num_categories(self) -> int:
        if not self.masks:
            raise ValueError("empty mask set has no category count")
        return len(self.masks[0].dist)


@dataclass(frozen=True, eq=False)
class CentroidStore:
    """Per-category feature centroids with validity flags and EMA coefficient.

    Invalid categories hold an all-zero row and never participate in
    distance ranking.
    """

    centroids: np.ndarray
    valid: np.ndarray
    gamma_prime: float = 0.9

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if c.ndim != 2:
            raise ValueError("centroids must be a (C,E) matrix")
        if v.shape != (c.shape[0],):
            raise ValueError("validity flags must match the category count")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        if not 0.0 < self.gamma_prime < 1.0:
            raise ValueError("gamma_prime must lie in (0,1)")
        c = c.copy()
        c[~v] = 0.0
        object.__setattr__(self, "centroids", _freeze(c))
        object.__setattr__(self, "valid", _freeze(v))

    @property
    def num_categories(self) -> int:
        return self.centroids.shape[0]

    @property
    def channels(self) -> int:
        return self.centroids.shape[1]

    def num_valid(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True, eq=False)
class Segment:
    """One panoptic segment: a (category, instance) pair with its mask."""

    category: int
    instance: int
    mask: BinaryMask


@dataclass(frozen=True, eq=False)
class PanopticLabel:
    """Non-overlapping per-pixel (category, instance) map.

    VOID pixels (category == VOID) carry instance NO_INSTANCE; every other
    pixel belongs to exactly one (category, instance) segment.
    """

    category: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        cat = np.asarray(self.category, dtype=np.int32)
        inst = np.asarray(self.instance, dtype=np.int32)
        if cat.ndim != 2 or cat.shape != inst.shape:
            raise ValueError("category and instance planes must share one (H,W) shape")
        void = cat == VOID
        if np.any(inst[void] != NO_INSTANCE):
            raise ValueError("VOID pixels must carry instance NO_INSTANCE")
        if np.any(cat[~void] < 0) or np.any(inst[~void] < 0):
            raise ValueError("non-void pixels need non-negative category and instance")
        object.__setattr__(self, "category", _freeze(cat))
        object.__setattr__(self, "instance", _freeze(inst))

    @property
    def height(self) -> int:
        return self.category.shape[0]

    @property
    def width(self) -> int:
        return self.category.shape[1]

    def segments(self) -> tuple[Segment, ...]:
        """Extract all segments, sorted by (category, instance)."""
        valid = self.category != VOID
        if not np.any(valid):
            return ()
        cats = self.category[valid].astype(np.int64)
        insts = self.instance[valid].astype(np.int64)
        keys = np.unique(cats * (int(insts.max()) + 1) + insts) if insts.size else ()
        out = []
        for key in keys:
            c = int(key // (int(insts.max()) + 1))
            i = int(key % (int(insts.max()) + 1))
            mask = (self.category == c) & (self.instance == i)
            out.append(Segment(c, i, BinaryMask(mask)))
        out.sort(key=lambda s: (s.category, s.instance))
        return tuple(out)

    def same_as(self, other: "PanopticLabel") -> bool:
        return bool(
            np.array_equal(self.category, other.category)
            and np.array_equal(self.instance, other.instance)
        )

    @staticmethod
    def from_segments(height: int, width: int, segments: Sequence[Segment]) -> "PanopticLabel":
        """Build a label map from disjoint segments; uncovered pixels are VOID."""
        cat = np.full((height, width), VOID, dtype=np.int32)
        inst = np.full((height, width), NO_INSTANCE, dtype=np.int32)
        seen = {}
        for seg in segments:
            if seg.mask.bits.shape != (height, width):
                raise ValueError("segment mask dims do not match the label dims")
            key = (seg.category, seg.instance)
            if key in seen:
                raise ValueError(f"duplicate segment id {key}")
            seen[key] = True
            if np.any(cat[seg.mask.bits] != VOID):
                raise ValueError("segments passed to from_segments must be disjoint")
            cat[seg.mask.bits] = seg.category
            inst[seg.mask.bits] = seg.instance
        return PanopticLabel(cat, inst)


def mask_pooled_vector(f: FeatureMap, m: BinaryMask, mode: str = POOL_MASK_MEAN) -> np.ndarray:
    """Pool the features under a mask into one E-dim vector.

    ``mask-mean`` divides the masked feature sum by the mask area;
    ``strict-gap`` divides by H*W (the literal global average pool of the
    masked map). Accumulation runs in float64.
    """
    if (f.height, f.width) != (m.height, m.width):
        raise ValueError(
            f"feature map {f.height}x{f.width} and mask {m.height}x{m.width} dims disagree"
        )
    if mode not in (POOL_MASK_MEAN, POOL_STRICT_GAP):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if mode == POOL_MASK_MEAN and m.is_empty():
        raise ValueError("mask-mean pooling requires a non-empty mask")
    total = f.values.astype(np.float64)[:, m.bits].sum(axis=1)
    denom = float(m.area) if mode == POOL_MASK_MEAN else float(m.height * m.width)
    return total / denom


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of absolute coordinate differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must share one length, got {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def stable_softmax(scores: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over a 1-d score vector (float64)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("softmax requires a non-empty 1-d score vector")
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax(scores: Sequence[float]) -> CategoryDistribution:
    """Numerically stable softmax, returned as a probability vector."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size and not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    return CategoryDistribution(stable_softmax(s))
