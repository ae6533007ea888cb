"""Random scenario builder for pipeline-vs-oracle equivalence checks.

Features and centroids are quantized to multiples of 1/8 so every pooled
sum is exact in float64 regardless of accumulation order; the pipeline and
the loop-based reference then agree bit for bit, making exact output
comparison meaningful.
"""

from __future__ import annotations

import numpy as np

from maskcal.core import (
    BinaryMask,
    CategoryDistribution,
    CentroidStore,
    FeatureMap,
    PseudoMask,
    PseudoMaskSet,
)
from maskcal.hmc import HmcConfig, Stage, init_centroids
from maskcal.superpixel import SuperpixelMap, enforce_connectivity

ORDERS = (
    (),
    (Stage.REGION,),
    (Stage.SUPERPIXEL,),
    (Stage.PIXEL,),
    (Stage.REGION, Stage.SUPERPIXEL),
    (Stage.SUPERPIXEL, Stage.PIXEL),
    (Stage.REGION, Stage.SUPERPIXEL, Stage.PIXEL),
    (Stage.PIXEL, Stage.SUPERPIXEL, Stage.REGION),
    (Stage.SUPERPIXEL, Stage.PIXEL, Stage.REGION),
)


def quantized(rng, shape, scale=8, span=32):
    return rng.integers(-span, span + 1, size=shape).astype(np.float64) / scale


def random_superpixels(rng, h, w) -> SuperpixelMap:
    """Nearest-seed (L1) tiling with lower-index tie-breaks, made connected."""
    n_seeds = int(rng.integers(1, max(2, (h * w) // 6) + 1))
    seeds_r = rng.integers(0, h, size=n_seeds)
    seeds_c = rng.integers(0, w, size=n_seeds)
    rows = np.arange(h)[:, None, None]
    cols = np.arange(w)[None, :, None]
    dist = np.abs(rows - seeds_r[None, None, :]) + np.abs(cols - seeds_c[None, None, :])
    labels = np.argmin(dist, axis=2)
    return enforce_connectivity(labels, 0.5, expected_count=n_seeds)


def random_blob(rng, h, w) -> np.ndarray:
    bits = np.zeros((h, w), dtype=bool)
    n_rects = int(rng.integers(1, 3))
    for _ in range(n_rects):
        r0 = int(rng.integers(0, h))
        c0 = int(rng.integers(0, w))
        r1 = int(rng.integers(r0, min(h, r0 + 1 + h // 2)))
        c1 = int(rng.integers(c0, min(w, c0 + 1 + w // 2)))
        bits[r0 : r1 + 1, c0 : c1 + 1] = True
    if not bits.any():
        bits[rng.integers(0, h), rng.integers(0, w)] = True
    return bits


def random_scenario(rng):
    """One full random calibration problem plus its HmcConfig."""
    h = int(rng.integers(4, 17))
    w = int(rng.integers(4, 17))
    c = int(rng.integers(2, 5))
    e = int(rng.integers(2, 5))
    k = int(rng.integers(1, 5))

    features = FeatureMap(quantized(rng, (e, h, w)).astype(np.float32))
    sp = random_superpixels(rng, h, w)

    masks = []
    for _ in range(k):
        probs = rng.dirichlet(np.ones(c))
        masks.append(
            PseudoMask(int(np.argmax(probs)), CategoryDistribution(probs),
                       BinaryMask(random_blob(rng, h, w)))
        )
    ms = PseudoMaskSet(tuple(masks))

    if rng.random() < 0.5:
        store = init_centroids([(pm, features) for pm in ms], c, e,
                               gamma_prime=0.9)
        if store.num_valid() == 0:
            store = CentroidStore(quantized(rng, (c, e)), np.ones(c, dtype=bool))
    else:
        valid = rng.random(c) < 0.75
        if not valid.any():
            valid[int(rng.integers(0, c))] = True
        store = CentroidStore(quantized(rng, (c, e)), valid)

    cfg = HmcConfig(
        stage_order=ORDERS[int(rng.integers(0, len(ORDERS)))],
        overlap_ratio_threshold=float(rng.choice([0.0, 0.25, 0.5])),
        vote_majority=float(rng.choice([0.3, 0.5, 0.75, 1.0])),
        temperature=float(rng.choice([0.5, 1.0, 2.0])),
        invalid_centroid_policy="neutral" if rng.random() < 0.5 else "exclude",
    )
    return ms, features, sp, store, cfg
