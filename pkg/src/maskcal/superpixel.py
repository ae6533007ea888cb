"""SLIC superpixels: grid-seeded localized k-means over (color, position)
with compactness weighting, followed by connectivity enforcement.

The partition is deterministic: nearest-seed ties break toward the lower
seed index, and connectivity merging follows a fixed raster-order rule.
RGB images are converted to CIELAB (D65 white point, sRGB transfer
function) before clustering; single-channel images are clustered on the
raw channel values.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import BinaryMask, FeatureMap, _freeze

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class SlicConfig:
    """Superpixel parameters.

    ``target_count=None`` derives the count from the image as
    ceil(H*W / 400). ``min_region_fraction`` scales the connectivity
    threshold: components smaller than that fraction of the mean superpixel
    area are absorbed into a neighbor.
    """

    target_count: Optional[int] = None
    compactness: float = 10.0
    iterations: int = 10
    min_region_fraction: float = 0.25

    def __post_init__(self):
        if self.target_count is not None and self.target_count < 1:
            raise ValueError("target_count must be positive")
        if self.compactness <= 0:
            raise ValueError("compactness must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0.0 < self.min_region_fraction <= 1.0:
            raise ValueError("min_region_fraction must lie in (0,1]")

    def resolve_count(self, height: int, width: int) -> int:
        if self.target_count is not None:
            return self.target_count
        return math.ceil(height * width / 400)


@dataclass(frozen=True, eq=False)
class SuperpixelMap:
    """Connected partition of the grid into labeled superpixels.

    Labels are dense in [0, count); every label is non-empty and its pixel
    set is 4-connected.
    """

    labels: np.ndarray
    count: int = field(init=False)

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int32)
        if lab.ndim != 2 or min(lab.shape) < 1:
            raise ValueError("superpixel labels must be a non-empty (H,W) grid")
        n = int(lab.max()) + 1
        if lab.min() < 0:
            raise ValueError("superpixel labels must be non-negative")
        counts = np.bincount(lab.ravel(), minlength=n)
        if np.any(counts == 0):
            raise ValueError("superpixel labels must be dense (every label non-empty)")
        object.__setattr__(self, "labels", _freeze(lab))
        object.__setattr__(self, "count", n)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def is_fully_connected(self) -> bool:
        """Exhaustive check that every label forms one 4-connected component."""
        for v in range(self.count):
            _, n = ndimage.label(self.labels == v, structure=_CROSS)
            if n != 1:
                return False
        return True


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert (3,H,W) sRGB in [0,1] to CIELAB (D65 white point)."""
    srgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    lin = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    r, g, b = lin[0], lin[1], lin[2]
    x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b
    y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b
    z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b
    xyz = np.stack([x / 0.95047, y / 1.0, z / 1.08883])
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab


def _seed_grid(height: int, width: int, count: int) -> tuple[int, int]:
    """Pick a rows x cols seed grid whose product tracks the target count,
    preferring near-square cells; deterministic."""
    best = None
    for rows in range(1, min(height, 2 * count) + 1):
        cols = min(width, max(1, round(count / rows)))
        cell_aspect = abs(height / rows - width / cols)
        key = (abs(rows * cols - count), cell_aspect, rows)
        if best is None or key < best[0]:
            best = (key, rows, cols)
    return best[1], best[2]


def compute_superpixels(
    image: FeatureMap, cfg: SlicConfig, *, convert_rgb_to_lab: bool = True
) -> SuperpixelMap:
    """Run SLIC over a 1- or 3-channel image.

    Cluster space is (color..., compactness * y/S, compactness * x/S) with
    S = sqrt(H*W/I); the assignment search is restricted to a 2S x 2S
    window around each cluster center. Set ``convert_rgb_to_lab=False`` to
    cluster a raw 3-channel feature slice instead of an sRGB image.
    """
    if image.channels not in (1, 3):
        raise ValueError(f"superpixels need 1 or 3 channels, got {image.channels}")
    h, w = image.height, image.width
    count = cfg.resolve_count(h, w)
    if count > h * w:
        raise ValueError(f"target count {count} exceeds pixel count {h * w}")

    if image.channels == 3 and convert_rgb_to_lab:
        color = rgb_to_lab(image.values)
    else:
        color = image.values.astype(np.float64)

    interval = math.sqrt(h * w / count)
    grid_rows, grid_cols = _seed_grid(h, w, count)
    n_seeds = grid_rows * grid_cols

    seed_r = (np.arange(grid_rows, dtype=np.float64)[:, None] + 0.5) * h / grid_rows - 0.5
    seed_c = (np.arange(grid_cols, dtype=np.float64)[None, :] + 0.5) * w / grid_cols - 0.5
    center_pos = np.stack(
        [np.broadcast_to(seed_r, (grid_rows, grid_cols)).ravel(),
         np.broadcast_to(seed_c, (grid_rows, grid_cols)).ravel()],
        axis=1,
    )
    seed_pr = np.clip(np.floor(center_pos[:, 0] + 0.5).astype(int), 0, h - 1)
    seed_pc = np.clip(np.floor(center_pos[:, 1] + 0.5).astype(int), 0, w - 1)
    center_color = color[:, seed_pr, seed_pc].T.copy()

    # Initial labels: exact seed-grid cells, so every pixel is always assigned.
    cell_r = np.minimum((np.arange(h) * grid_rows) // h, grid_rows - 1)
    cell_c = np.minimum((np.arange(w) * grid_cols) // w, grid_cols - 1)
    labels = (cell_r[:, None] * grid_cols + cell_c[None, :]).astype(np.int32)

    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    m_over_s = cfg.compactness / interval

    for _ in range(cfg.iterations):
        best_d = np.full((h, w), np.inf)
        new_labels = labels.copy()
        for k in range(n_seeds):
            cr, cc = center_pos[k]
            r0 = max(0, int(math.floor(cr - interval)))
            r1 = min(h - 1, int(math.ceil(cr + interval)))
            c0 = max(0, int(math.floor(cc - interval)))
            c1 = min(w - 1, int(math.ceil(cc + interval)))
            if r0 > r1 or c0 > c1:
                continue
            win = color[:, r0 : r1 + 1, c0 : c1 + 1]
            dc = ((win - center_color[k][:, None, None]) ** 2).sum(axis=0)
            dr = (rows[r0 : r1 + 1, None] - cr) * m_over_s
            dcl = (cols[None, c0 : c1 + 1] - cc) * m_over_s
            d = dc + dr**2 + dcl**2
            better = d < best_d[r0 : r1 + 1, c0 : c1 + 1]
            best_d[r0 : r1 + 1, c0 : c1 + 1][better] = d[better]
            new_labels[r0 : r1 + 1, c0 : c1 + 1][better] = k
        labels = new_labels
        for k in range(n_seeds):
            sel = labels == k
            if not np.any(sel):
                continue
            rr, cc2 = np.nonzero(sel)
            center_pos[k, 0] = rr.mean()
            center_pos[k, 1] = cc2.mean()
            center_color[k] = color[:, rr, cc2].mean(axis=1)

    return enforce_connectivity(labels, cfg.min_region_fraction, expected_count=count)


def enforce_connectivity(
    labels: np.ndarray, min_region_fraction: float, expected_count: Optional[int] = None
) -> SuperpixelMap:
    """Split disconnected label regions and absorb undersized components.

    Every 4-connected component smaller than
    ``min_region_fraction * (H*W / expected_count)`` is merged into its
    largest adjacent component (ties toward the earlier component in
    raster order). Components are then relabeled by first raster
    appearance, so a canonical connected partition is a fixed point.
    """
    lab = np.asarray(labels)
    if lab.ndim != 2 or min(lab.shape) < 1:
        raise ValueError("labels must be a non-empty (H,W) grid")
    h, w = lab.shape
    if expected_count is None:
        expected_count = len(np.unique(lab))
    threshold = min_region_fraction * (h * w / expected_count)

    comp = np.full((h, w), -1, dtype=np.int64)
    next_id = 0
    for v in np.unique(lab):
        marked, n = ndimage.label(lab == v, structure=_CROSS)
        if n == 0:
            continue
        sel = marked > 0
        comp[sel] = marked[sel] + next_id - 1
        next_id += n
    comp = _renumber_by_first_appearance(comp)
    n_comp = next_id

    sizes = np.bincount(comp.ravel(), minlength=n_comp).astype(np.int64)
    neighbors: list[set[int]] = [set() for _ in range(n_comp)]
    for x, y in _adjacent_component_pairs(comp, n_comp):
        neighbors[x].add(y)
        neighbors[y].add(x)

    parent = list(range(n_comp))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def merge(small: int, into: int) -> None:
        parent[small] = into
        sizes[into] += sizes[small]
        sizes[small] = 0
        moved = neighbors[small]
        neighbors[small] = set()
        for nb in moved:
            root = find(nb)
            neighbors[root].discard(small)
            if root != into:
                neighbors[into].add(root)
                neighbors[root].add(into)
        neighbors[into].discard(into)
        neighbors[into].discard(small)

    def smallest_mergeable(limit: float) -> Optional[int]:
        pick = None
        for cid in range(n_comp):
            if parent[cid] != cid or sizes[cid] == 0 or sizes[cid] >= limit:
                continue
            if not neighbors[cid]:
                continue
            if pick is None or (sizes[cid], cid) < (sizes[pick], pick):
                pick = cid
        return pick

    while True:
        cid = smallest_mergeable(threshold)
        if cid is None:
            break
        target = max(neighbors[cid], key=lambda nb: (sizes[find(nb)], -find(nb)))
        merge(cid, find(target))

    # Safety: keep the final count within [expected/2, 2*expected] from above.
    if expected_count is not None:
        live = lambda: [c for c in range(n_comp) if parent[c] == c and sizes[c] > 0]
        while len(live()) > 2 * expected_count:
            cid = smallest_mergeable(math.inf)
            if cid is None:
                break
            target = max(neighbors[cid], key=lambda nb: (sizes[find(nb)], -find(nb)))
            merge(cid, find(target))

    roots = np.array([find(c) for c in range(n_comp)], dtype=np.int64)
    merged = roots[comp]
    return SuperpixelMap(_renumber_by_first_appearance(merged).astype(np.int32))


def _renumber_by_first_appearance(grid: np.ndarray) -> np.ndarray:
    """Relabel grid values densely, ordered by first raster appearance."""
    flat = grid.ravel()
    uniq, first_idx = np.unique(flat, return_index=True)
    remap = np.full(int(uniq.max()) + 1, -1, dtype=np.int64)
    remap[uniq[np.argsort(first_idx, kind="stable")]] = np.arange(len(uniq))
    return remap[grid]


def _adjacent_component_pairs(comp: np.ndarray, n_comp: int) -> list[tuple[int, int]]:
    """Unique unordered 4-adjacency pairs between distinct component ids."""
    chunks = []
    a, b = comp[:, :-1].ravel(), comp[:, 1:].ravel()
    m = a != b
    chunks.append(np.stack([a[m], b[m]], axis=1))
    a, b = comp[:-1, :].ravel(), comp[1:, :].ravel()
    m = a != b
    chunks.append(np.stack([a[m], b[m]], axis=1))
    pairs = np.concatenate(chunks, axis=0)
    if pairs.size == 0:
        return []
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    enc = np.unique(lo * n_comp + hi)
    return [(int(e // n_comp), int(e % n_comp)) for e in enc]


def overlap_areas(m: BinaryMask, sp: SuperpixelMap) -> np.ndarray:
    """Per-superpixel count of mask pixels; sums to the mask area."""
    if (m.height, m.width) != (sp.height, sp.width):
        raise ValueError("mask and superpixel dims disagree")
    return np.bincount(sp.labels[m.bits], minlength=sp.count)


class SuperpixelCache:
    """Content-hash keyed cache of superpixel maps.

    Superpixels are assumed stable per image, so repeated calibration of
    the same image (e.g. across self-training steps) reuses one partition.
    """

    def __init__(self):
        self._store: dict[tuple, SuperpixelMap] = {}

    @staticmethod
    def _key(image: FeatureMap, cfg: SlicConfig, convert: bool) -> tuple:
        digest = hashlib.blake2b(image.values.tobytes(), digest_size=16).hexdigest()
        return (digest, image.values.shape, cfg, convert)

    def get(
        self, image: FeatureMap, cfg: SlicConfig, *, convert_rgb_to_lab: bool = True
    ) -> SuperpixelMap:
        key = self._key(image, cfg, convert_rgb_to_lab)
        hit = self._store.get(key)
        if hit is None:
            hit = compute_superpixels(image, cfg, convert_rgb_to_lab=convert_rgb_to_lab)
            self._store[key] = hit
        return hit

    def __len__(self) -> int:
        return len(self._store)
