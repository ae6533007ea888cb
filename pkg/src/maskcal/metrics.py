"""Panoptic quality evaluation: IoU, the unique IoU>0.5 segment matching,
per-category SQ/RQ/PQ with means, TP/FP/FN proportion accounting, and the
overlap-resolution step that flattens mask sets into panoptic labels.

All functions are pure; per-image match results aggregate associatively,
so multi-image evaluation is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .core import (
    NO_INSTANCE,
    VOID,
    BinaryMask,
    PanopticLabel,
    PseudoMask,
)
from .hmc import CalibratedMask

SegmentId = tuple[int, int]


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0 when both masks are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("mask dims disagree")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = a.area + b.area - inter
    return inter / union if union else 0.0


@dataclass(frozen=True)
class MatchResult:
    """Segment matching of one prediction/ground-truth label pair.

    Segment ids are (category, instance) pairs. Every matched pair has
    IoU > 0.5 and each segment appears in at most one pair; the remaining
    segments are false positives / false negatives.
    """

    pairs: tuple[tuple[SegmentId, SegmentId, float], ...]
    unmatched_predictions: tuple[SegmentId, ...]
    unmatched_ground_truth: tuple[SegmentId, ...]


def _segment_index_map(label: PanopticLabel) -> tuple[np.ndarray, list[SegmentId], np.ndarray]:
    """Dense per-pixel segment indices (-1 for void), id list and areas."""
    h, w = label.height, label.width
    non_void = label.category != VOID
    idx_map = np.full((h, w), -1, dtype=np.int64)
    ids: list[SegmentId] = []
    areas: list[int] = []
    if np.any(non_void):
        cats = label.category.astype(np.int64)
        insts = label.instance.astype(np.int64)
        base = int(insts[non_void].max()) + 1
        codes = np.where(non_void, cats * base + insts, -1)
        uniq, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
        offset = 0
        for pos, code in enumerate(uniq):
            if code < 0:
                offset = 1
                continue
            ids.append((int(code // base), int(code % base)))
            areas.append(int(counts[pos]))
        idx_map = inverse.reshape(h, w) - offset
        idx_map[~non_void] = -1
    # uniq is sorted and instance < base, so ids are in (category, instance)
    # order and stay aligned with areas.
    return idx_map, ids, np.asarray(areas, dtype=np.int64)


def match_segments(
    pred: PanopticLabel, gt: PanopticLabel, *, ignore_void: bool = False
) -> MatchResult:
    """Match predicted to ground-truth segments: same category and IoU > 0.5.

    The strict 0.5 threshold makes every match unique, so no assignment
    search is needed. With ``ignore_void`` set, pixels void in the ground
    truth are excluded from the prediction side of each IoU denominator.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("prediction and ground truth dims disagree")
    p_map, p_ids, p_areas = _segment_index_map(pred)
    g_map, g_ids, g_areas = _segment_index_map(gt)

    if ignore_void and len(p_ids):
        gt_void = gt.category == VOID
        void_overlap = np.bincount(
            p_map[(p_map >= 0) & gt_void], minlength=len(p_ids)
        )
        p_eff = p_areas - void_overlap
    else:
        p_eff = p_areas

    both = (p_map >= 0) & (g_map >= 0)
    pairs: list[tuple[SegmentId, SegmentId, float]] = []
    matched_p: set[int] = set()
    matched_g: set[int] = set()
    if np.any(both) and len(p_ids) and len(g_ids):
        codes = p_map[both] * len(g_ids) + g_map[both]
        uniq, counts = np.unique(codes, return_counts=True)
        for code, inter in zip(uniq, counts):
            pi, gi = int(code // len(g_ids)), int(code % len(g_ids))
            if p_ids[pi][0] != g_ids[gi][0]:
                continue
            union = int(p_eff[pi]) + int(g_areas[gi]) - int(inter)
            value = inter / union if union > 0 else 0.0
            if value > 0.5:
                pairs.append((p_ids[pi], g_ids[gi], float(value)))
                matched_p.add(pi)
                matched_g.add(gi)
    pairs.sort(key=lambda t: (t[0], t[1]))
    fp = tuple(p_ids[i] for i in range(len(p_ids)) if i not in matched_p)
    fn = tuple(g_ids[i] for i in range(len(g_ids)) if i not in matched_g)
    return MatchResult(tuple(pairs), fp, fn)


@dataclass(frozen=True)
class CategoryPq:
    sq: float
    rq: float
    pq: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class PqReport:
    """Per-category SQ/RQ/PQ with means and the TP/FP/FN proportion triple.

    ``per_category`` holds every category present in prediction or ground
    truth; the means run over those categories. Proportions are fractions
    of TP + FP + FN pooled over all categories.
    """

    per_category: dict[int, CategoryPq]
    msq: float
    mrq: float
    mpq: float
    tp_fraction: float
    fp_fraction: float
    fn_fraction: float

    def to_dict(self) -> dict:
        return {
            "per_category": {
                str(c): {
                    "sq": r.sq, "rq": r.rq, "pq": r.pq,
                    "tp": r.tp, "fp": r.fp, "fn": r.fn,
                }
                for c, r in sorted(self.per_category.items())
            },
            "msq": self.msq,
            "mrq": self.mrq,
            "mpq": self.mpq,
            "tp_fraction": self.tp_fraction,
            "fp_fraction": self.fp_fraction,
            "fn_fraction": self.fn_fraction,
        }

    def format_text(self, names: Sequence[str] | None = None) -> str:
        lines = [f"{'category':<16} {'SQ':>8} {'RQ':>8} {'PQ':>8} {'TP':>6} {'FP':>6} {'FN':>6}"]
        for c, r in sorted(self.per_category.items()):
            name = names[c] if names and c < len(names) else f"cat{c}"
            lines.append(
                f"{name:<16} {r.sq:>8.4f} {r.rq:>8.4f} {r.pq:>8.4f}"
                f" {r.tp:>6d} {r.fp:>6d} {r.fn:>6d}"
            )
        lines.append(
            f"{'mean':<16} {self.msq:>8.4f} {self.mrq:>8.4f} {self.mpq:>8.4f}"
        )
        lines.append(
            "proportions      "
            f"TP {self.tp_fraction:.4f}  FP {self.fp_fraction:.4f}  FN {self.fn_fraction:.4f}"
        )
        return "\n".join(lines)


def compute_pq(
    match: Union[MatchResult, Iterable[MatchResult]], num_categories: int
) -> PqReport:
    """SQ/RQ/PQ per category and their means from one or many match results.

    SQ is the mean matched IoU (0 without TP); RQ is TP/(TP + FP/2 + FN/2)
    (0 on an empty denominator); PQ = SQ * RQ. Means run over categories
    present in prediction or ground truth.
    """
    matches = [match] if isinstance(match, MatchResult) else list(match)
    iou_sum = np.zeros(num_categories, dtype=np.float64)
    tp = np.zeros(num_categories, dtype=np.int64)
    fp = np.zeros(num_categories, dtype=np.int64)
    fn = np.zeros(num_categories, dtype=np.int64)
    for m in matches:
        for (pc, _), (gc, _), value in m.pairs:
            if pc != gc:
                raise ValueError("matched pair with mismatched categories")
            _check_category(pc, num_categories)
            iou_sum[pc] += value
            tp[pc] += 1
        for c, _ in m.unmatched_predictions:
            _check_category(c, num_categories)
            fp[c] += 1
        for c, _ in m.unmatched_ground_truth:
            _check_category(c, num_categories)
            fn[c] += 1

    per_category: dict[int, CategoryPq] = {}
    for c in range(num_categories):
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        sq = float(iou_sum[c] / tp[c]) if tp[c] else 0.0
        denom = tp[c] + 0.5 * fp[c] + 0.5 * fn[c]
        rq = float(tp[c] / denom) if denom else 0.0
        per_category[c] = CategoryPq(sq, rq, sq * rq, int(tp[c]), int(fp[c]), int(fn[c]))

    if per_category:
        msq = float(np.mean([r.sq for r in per_category.values()]))
        mrq = float(np.mean([r.rq for r in per_category.values()]))
        mpq = float(np.mean([r.pq for r in per_category.values()]))
    else:
        msq = mrq = mpq = 0.0
    total = int(tp.sum() + fp.sum() + fn.sum())
    tp_frac = float(tp.sum() / total) if total else 0.0
    fp_frac = float(fp.sum() / total) if total else 0.0
    fn_frac = float(fn.sum() / total) if total else 0.0
    return PqReport(per_category, msq, mrq, mpq, tp_frac, fp_frac, fn_frac)


def _check_category(c: int, num_categories: int) -> None:
    if not 0 <= c < num_categories:
        raise ValueError(f"segment category {c} out of range [0,{num_categories})")


def resolve_overlaps(
    masks: Sequence[Union[PseudoMask, CalibratedMask]],
    height: int | None = None,
    width: int | None = None,
) -> PanopticLabel:
    """Flatten possibly-overlapping masks into a panoptic label.

    Contested pixels go to the mask with the higher probability at its
    (corrected) category, ties toward the lower mask index; unclaimed
    pixels become VOID. Dropped masks are skipped and masks emptied by the
    resolution are omitted. Instance ids are the input mask indices.
    Explicit dims are only required when no mask supplies them.
    """
    entries = []
    shape = (height, width) if height is not None and width is not None else None
    for index, m in enumerate(masks):
        if isinstance(m, CalibratedMask):
            usable = not m.dropped
            bits = m.corrected_mask.bits
            category = m.corrected_category
            confidence = float(m.original.dist.probs[category]) if usable else 0.0
        else:
            usable = True
            bits = m.mask.bits
            category = m.category
            confidence = float(m.dist.probs[category])
        if shape is None:
            shape = bits.shape
        elif bits.shape != shape:
            raise ValueError("masks passed to resolve_overlaps must share dims")
        if usable:
            entries.append((confidence, index, category, bits))
    if shape is None:
        raise ValueError("resolve_overlaps with no masks needs explicit dims")
    cat = np.full(shape, VOID, dtype=np.int32)
    inst = np.full(shape, NO_INSTANCE, dtype=np.int32)
    # Paint in ascending (confidence, -index) order so the winner of each
    # pixel is the highest-confidence claimant, lowest index on ties.
    for confidence, index, category, bits in sorted(
        entries, key=lambda e: (e[0], -e[1])
    ):
        cat[bits] = category
        inst[bits] = index
    return PanopticLabel(cat, inst)
