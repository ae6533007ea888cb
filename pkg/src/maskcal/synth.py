"""Deterministic synthetic panoptic scenes in two domains.

Scenes place elliptical/rectangular "thing" blobs over "stuff" background
bands; per-pixel features are the category signature plus Gaussian noise,
with a fixed offset added in the target domain. All randomness comes from
PCG64 generators keyed by the scene seed, so scenes are bit-reproducible;
the generator identifier is recorded by the CLI in emitted metadata.

Layout randomness is shared between the two domains of one seed (so the
target differs from the source only by noise draw and feature offset),
which keeps the mean target-source feature difference centered on the
configured shift.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (
    BinaryMask,
    CategoryDistribution,
    FeatureMap,
    PanopticLabel,
    PseudoMask,
    PseudoMaskSet,
)

PRNG_ALGORITHM = "pcg64"

DOMAIN_SOURCE = "source"
DOMAIN_TARGET = "target"

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def category_signatures(num_categories: int, channels: int, separation: float) -> np.ndarray:
    """One-hot per-category feature signatures, scaled by the separation.

    Any two signatures are exactly 2 * separation apart in L1, and no
    signature lies in the convex hull of the others, so averaged (mixed)
    centroids stay closest to their own constituents. Requires
    channels >= num_categories.
    """
    if channels < num_categories:
        raise ValueError(
            f"{channels} feature channels cannot encode {num_categories} "
            "separated signatures (need feature_dim >= num_categories)"
        )
    return separation * np.eye(num_categories, channels, dtype=np.float64)


def category_palette(num_categories: int) -> np.ndarray:
    """Distinct sRGB colors in [0,1], one per category (hue wheel)."""
    colors = np.zeros((num_categories, 3), dtype=np.float64)
    for c in range(num_categories):
        h = (c / num_categories) * 6.0
        x = 1.0 - abs(h % 2.0 - 1.0)
        band = int(h) % 6
        r, g, b = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][band]
        value, sat = 0.9, 0.85
        colors[c] = value * (np.array([r, g, b]) * sat + (1.0 - sat))
    return colors


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene parameters; ``domain_shift`` defaults to zero."""

    height: int = 32
    width: int = 32
    num_categories: int = 4
    stuff_categories: Optional[tuple[int, ...]] = None
    blobs_per_thing: tuple[int, int] = (1, 2)
    feature_dim: int = 4
    class_signature_separation: float = 4.0
    noise_sigma: float = 0.5
    noise_smoothing: int = 0
    domain_shift: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.feature_dim < 1:
            raise ValueError("scene dims and feature_dim must be positive")
        if self.num_categories < 2:
            raise ValueError("scenes need at least 2 categories")
        if self.class_signature_separation <= 0:
            raise ValueError("class_signature_separation must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.noise_smoothing < 0:
            raise ValueError("noise_smoothing must be non-negative")
        lo, hi = self.blobs_per_thing
        if lo < 0 or hi < lo:
            raise ValueError("blobs_per_thing must be a valid (lo, hi) range")
        stuff = self.stuff_categories
        if stuff is None:
            stuff = tuple(range(max(1, self.num_categories // 2)))
        stuff = tuple(sorted(set(stuff)))
        if not stuff or any(not 0 <= c < self.num_categories for c in stuff):
            raise ValueError("stuff_categories must be a non-empty subset of categories")
        object.__setattr__(self, "stuff_categories", stuff)
        shift = self.domain_shift
        if shift is None:
            shift = tuple(0.0 for _ in range(self.feature_dim))
        shift = tuple(float(x) for x in shift)
        if len(shift) != self.feature_dim:
            raise ValueError("domain_shift length must equal feature_dim")
        object.__setattr__(self, "domain_shift", shift)

    @property
    def thing_categories(self) -> tuple[int, ...]:
        return tuple(
            c for c in range(self.num_categories) if c not in self.stuff_categories
        )

    def signatures(self) -> np.ndarray:
        return category_signatures(
            self.num_categories, self.feature_dim, self.class_signature_separation
        )


@dataclass(frozen=True, eq=False)
class Scene:
    """One generated scene: a color render, a feature grid and ground truth."""

    image: FeatureMap
    features: FeatureMap
    gt: PanopticLabel
    num_categories: int


def _layout(cfg: SceneConfig) -> np.ndarray:
    """Category map shared by both domains of one seed."""
    rng = _rng(cfg.seed, 0xB10B5)
    h, w = cfg.height, cfg.width
    stuff = cfg.stuff_categories
    if len(stuff) > h:
        raise ValueError("cannot fit one band per stuff category: image too short")
    weights = rng.random(len(stuff)) + 0.25
    heights = np.maximum(1, np.floor(weights / weights.sum() * h).astype(int))
    while heights.sum() > h:
        heights[int(np.argmax(heights))] -= 1
    heights[-1] += h - heights.sum()
    cat_map = np.zeros((h, w), dtype=np.int32)
    row = 0
    for band, c in zip(heights, stuff):
        cat_map[row : row + band, :] = c
        row += band

    max_half_r = max(1, h // 6)
    max_half_c = max(1, w // 6)
    for c in cfg.thing_categories:
        n = int(rng.integers(cfg.blobs_per_thing[0], cfg.blobs_per_thing[1] + 1))
        for _ in range(n):
            a = int(rng.integers(1, max_half_r + 1))
            b = int(rng.integers(1, max_half_c + 1))
            if h - 1 - a < a or w - 1 - b < b:
                raise ValueError("blobs cannot fit: image too small for the blob range")
            r0 = int(rng.integers(a, h - a))
            c0 = int(rng.integers(b, w - b))
            if rng.random() < 0.5:
                cat_map[r0 - a : r0 + a + 1, c0 - b : c0 + b + 1] = c
            else:
                rr = np.arange(h)[:, None] - r0
                cc = np.arange(w)[None, :] - c0
                inside = (rr / (a + 0.5)) ** 2 + (cc / (b + 0.5)) ** 2 <= 1.0
                cat_map[inside] = c
    return cat_map


def _instances(cat_map: np.ndarray) -> np.ndarray:
    """Split every category's pixels into 4-connected segments with
    globally unique instance ids, enumerated in (category, component)
    order."""
    inst = np.full(cat_map.shape, -1, dtype=np.int32)
    next_id = 0
    for c in np.unique(cat_map):
        marked, n = ndimage.label(cat_map == c, structure=_CROSS)
        for k in range(1, n + 1):
            inst[marked == k] = next_id
            next_id += 1
    return inst


def generate_scene(cfg: SceneConfig, domain: str) -> Scene:
    """Generate one scene; deterministic for a fixed (config, domain)."""
    if domain not in (DOMAIN_SOURCE, DOMAIN_TARGET):
        raise ValueError(f"unknown domain {domain!r}")
    cat_map = _layout(cfg)
    inst_map = _instances(cat_map)
    gt = PanopticLabel(cat_map, inst_map)

    sig = cfg.signatures()
    features = sig[cat_map].transpose(2, 0, 1).astype(np.float64)
    noise_rng = _rng(cfg.seed, 0xF3A7, 0 if domain == DOMAIN_SOURCE else 1)
    if cfg.noise_sigma > 0:
        noise = noise_rng.normal(0.0, 1.0, size=features.shape)
        if cfg.noise_smoothing > 0:
            # Spatially correlated noise: box-filter and rescale so the
            # per-pixel sd stays ~1 while errors become coherent blobs.
            size = 2 * cfg.noise_smoothing + 1
            noise = ndimage.uniform_filter(noise, size=(1, size, size)) * size
        features = features + cfg.noise_sigma * noise
    if domain == DOMAIN_TARGET:
        features = features + np.asarray(cfg.domain_shift, dtype=np.float64)[:, None, None]

    palette = category_palette(cfg.num_categories)
    image = palette[cat_map].transpose(2, 0, 1)
    return Scene(
        image=FeatureMap(image.astype(np.float32)),
        features=FeatureMap(features.astype(np.float32)),
        gt=gt,
        num_categories=cfg.num_categories,
    )


def perturb_predictions(
    gt: PanopticLabel,
    scene: Scene,
    flip_rate: float = 0.3,
    boundary_erode_dilate: int = 1,
    impostor_rate: float = 0.2,
    seed: int = 0,
) -> PseudoMaskSet:
    """Manufacture flawed pseudo masks from ground truth.

    Segment categories flip with probability ``flip_rate`` (the carried
    category keeps the distribution argmax; softness scales with the flip
    rate, so zero rates give exact one-hot reproductions). Boundaries are
    eroded or dilated by the given radius, and disjoint impostor blobs
    attach with probability ``impostor_rate``.
    """
    for name, rate in (("flip_rate", flip_rate), ("impostor_rate", impostor_rate)):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"{name} must lie in [0,1]")
    if boundary_erode_dilate < 0:
        raise ValueError("boundary_erode_dilate must be non-negative")
    rng = _rng(seed, 0x9E27B)
    num_categories = scene.num_categories
    softness = 0.5 * flip_rate
    masks = []
    for seg in gt.segments():
        carried = seg.category
        if rng.random() < flip_rate and num_categories > 1:
            others = [c for c in range(num_categories) if c != carried]
            carried = int(others[rng.integers(0, len(others))])
        probs = np.full(num_categories, softness / num_categories, dtype=np.float64)
        probs[carried] += 1.0 - softness

        bits = seg.mask.bits
        if boundary_erode_dilate > 0:
            if rng.random() < 0.5:
                shrunk = ndimage.binary_erosion(
                    bits, structure=_CROSS, iterations=boundary_erode_dilate
                )
                if shrunk.any():
                    bits = shrunk
            else:
                bits = ndimage.binary_dilation(
                    bits, structure=_CROSS, iterations=boundary_erode_dilate
                )
        if rng.random() < impostor_rate:
            bits = _attach_impostor(bits, rng)
        masks.append(
            PseudoMask(carried, CategoryDistribution(probs), BinaryMask(bits))
        )
    return PseudoMaskSet(tuple(masks))


def _attach_impostor(bits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Union a small blob disjoint from the mask; give up after 20 draws."""
    h, w = bits.shape
    side = int(rng.integers(2, 4))
    for _ in range(20):
        r0 = int(rng.integers(0, max(1, h - side + 1)))
        c0 = int(rng.integers(0, max(1, w - side + 1)))
        block = np.zeros_like(bits)
        block[r0 : r0 + side, c0 : c0 + side] = True
        if not np.any(block & bits):
            return bits | block
    return bits


def generate_pool(
    cfg: SceneConfig, domain: str, count: int, seed_stride: int = 1
) -> list[Scene]:
    """Generate ``count`` scenes with consecutive seeds."""
    return [
        generate_scene(dataclasses.replace(cfg, seed=cfg.seed + i * seed_stride), domain)
        for i in range(count)
    ]
