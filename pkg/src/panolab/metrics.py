"""Panoptic quality: segment matching and the PQ = SQ x RQ decomposition.

Matching pairs predicted and ground-truth segments of the same category when
their IoU exceeds 0.5; that threshold makes the matching unique, because two
disjoint ground-truth segments cannot both overlap one prediction in more
than half of its union. Ground-truth void pixels are excluded from every
union, and predictions mostly covered by void are not counted as false
positives.

SQ averages the matched IoUs, RQ is the F1-style detection term, and PQ is
their product, reported per category plus means over all / thing / stuff
categories (a category enters a mean only when it appears in prediction or
ground truth).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .panoptic import VOID

_INST_BITS = 20
_KEY_BITS = 31


@dataclass
class PQStats:
    """Per-category accumulators, mergeable across images by addition."""

    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    iou_sum: dict = field(default_factory=dict)

    def _bump(self, table, cat, amount=1):
        table[cat] = table.get(cat, 0) + amount

    def add_tp(self, cat, iou):
        self._bump(self.tp, cat)
        self.iou_sum[cat] = self.iou_sum.get(cat, 0.0) + iou

    def add_fp(self, cat):
        self._bump(self.fp, cat)

    def add_fn(self, cat):
        self._bump(self.fn, cat)

    def categories(self):
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    def merge(self, other):
        for cat in other.categories():
            self._bump(self.tp, cat, other.tp.get(cat, 0))
            self._bump(self.fp, cat, other.fp.get(cat, 0))
            self._bump(self.fn, cat, other.fn.get(cat, 0))
            self.iou_sum[cat] = (self.iou_sum.get(cat, 0.0)
                                 + other.iou_sum.get(cat, 0.0))
        return self


def iou(mask_a, mask_b, void_mask=None):
    """Intersection over union of two boolean masks.

    ``void_mask`` marks ground-truth void pixels removed from the union
    (mask_b is the ground-truth side).
    """
    inter = int((mask_a & mask_b).sum())
    union = int(mask_a.sum()) + int(mask_b.sum()) - inter
    if void_mask is not None:
        union -= int((mask_a & void_mask).sum())
    return inter / union if union > 0 else 0.0


def _segment_keys(pmap, categories):
    """int64 per-pixel segment key; stuff instances collapse to one segment."""
    cat = pmap.category.astype(np.int64)
    inst = pmap.instance.astype(np.int64)
    is_stuff = np.zeros_like(cat, dtype=bool)
    for cid in categories.stuff_ids():
        is_stuff |= cat == cid
    inst = np.where(is_stuff | (cat == VOID), 0, inst)
    return (cat << _INST_BITS) | inst


def _decode_key(key):
    return int(key >> _INST_BITS), int(key & ((1 << _INST_BITS) - 1))


def match_segments(pred, gt, categories):
    """Match same-category segments at IoU > 0.5.

    Returns (matches, false_positives, false_negatives) where matches maps
    ((cat, pred_inst), (cat, gt_inst)) -> IoU and the other two are lists of
    (cat, inst) pairs.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    pkeys = _segment_keys(pred, categories)
    gkeys = _segment_keys(gt, categories)

    pk, pareas = np.unique(pkeys, return_counts=True)
    gk, gareas = np.unique(gkeys, return_counts=True)
    parea = dict(zip(pk.tolist(), pareas.tolist()))
    garea = dict(zip(gk.tolist(), gareas.tolist()))

    combined = (gkeys << _KEY_BITS) | pkeys
    ck, careas = np.unique(combined, return_counts=True)
    inter = {}
    for k, a in zip(ck.tolist(), careas.tolist()):
        inter[(k >> _KEY_BITS, k & ((1 << _KEY_BITS) - 1))] = a

    void_key = 0  # (VOID << bits) | 0
    void_overlap = {p: 0 for p in parea}
    for (g, p), a in inter.items():
        if g == void_key:
            void_overlap[p] += a

    matches = {}
    matched_pred = set()
    matched_gt = set()
    for (g, p), a in inter.items():
        gcat, _ = _decode_key(g)
        pcat, _ = _decode_key(p)
        if gcat == VOID or pcat == VOID or gcat != pcat:
            continue
        union = parea[p] + garea[g] - a - void_overlap[p]
        if union <= 0:
            continue
        pair_iou = a / union
        if pair_iou > 0.5:
            matches[(_decode_key(p), _decode_key(g))] = pair_iou
            matched_pred.add(p)
            matched_gt.add(g)

    false_positives = []
    for p, area in parea.items():
        cat, _ = _decode_key(p)
        if cat == VOID or p in matched_pred:
            continue
        if void_overlap[p] / area > 0.5:
            continue  # mostly covered by void: not penalized
        false_positives.append(_decode_key(p))
    false_negatives = [_decode_key(g) for g in garea
                       if _decode_key(g)[0] != VOID and g not in matched_gt]
    return matches, false_positives, false_negatives


def accumulate_stats(pred, gt, categories, stats=None):
    """Fold one image pair into a PQStats."""
    if stats is None:
        stats = PQStats()
    matches, fps, fns = match_segments(pred, gt, categories)
    for ((cat, _), _), pair_iou in matches.items():
        stats.add_tp(cat, pair_iou)
    for cat, _ in fps:
        stats.add_fp(cat)
    for cat, _ in fns:
        stats.add_fn(cat)
    return stats


@dataclass
class CategoryScore:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    empty_tp: bool  # tp == 0: SQ reported as 0 by convention


@dataclass
class PQReport:
    per_category: dict           # cat id -> CategoryScore
    pq: float
    sq: float
    rq: float
    pq_things: float
    pq_stuff: float
    sq_things: float = 0.0
    sq_stuff: float = 0.0
    rq_things: float = 0.0
    rq_stuff: float = 0.0
    n_categories: int = 0
    n_things: int = 0
    n_stuff: int = 0


def compute_pq(stats, categories):
    """Reduce accumulated stats to per-category and aggregate PQ/SQ/RQ."""
    per_cat = {}
    for cat in stats.categories():
        tp = stats.tp.get(cat, 0)
        fp = stats.fp.get(cat, 0)
        fn = stats.fn.get(cat, 0)
        if tp + fp + fn == 0:
            continue
        sq = stats.iou_sum.get(cat, 0.0) / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_cat[cat] = CategoryScore(pq=sq * rq, sq=sq, rq=rq, tp=tp, fp=fp,
                                     fn=fn, empty_tp=tp == 0)

    def mean_over(ids):
        ids = [c for c in ids if c in per_cat]
        if not ids:
            return 0.0, 0.0, 0.0, 0
        n = len(ids)
        return (sum(per_cat[c].pq for c in ids) / n,
                sum(per_cat[c].sq for c in ids) / n,
                sum(per_cat[c].rq for c in ids) / n,
                n)

    pq_all, sq_all, rq_all, n_all = mean_over(per_cat.keys())
    pq_th, sq_th, rq_th, n_th = mean_over(categories.thing_ids())
    pq_st, sq_st, rq_st, n_st = mean_over(categories.stuff_ids())
    return PQReport(per_category=per_cat, pq=pq_all, sq=sq_all, rq=rq_all,
                    pq_things=pq_th, pq_stuff=pq_st, sq_things=sq_th,
                    sq_stuff=sq_st, rq_things=rq_th, rq_stuff=rq_st,
                    n_categories=n_all, n_things=n_th, n_stuff=n_st)


def evaluate_pair(pred, gt, categories):
    """One-shot PQ for a single image pair."""
    return compute_pq(accumulate_stats(pred, gt, categories), categories)


def render_report(report, categories):
    """Aligned plain-text table of the report."""
    lines = [f"{'':12} {'PQ':>8} {'SQ':>8} {'RQ':>8} {'N':>4}"]
    rows = [("all", report.pq, report.sq, report.rq, report.n_categories),
            ("things", report.pq_things, report.sq_things, report.rq_things,
             report.n_things),
            ("stuff", report.pq_stuff, report.sq_stuff, report.rq_stuff,
             report.n_stuff)]
    for name, pq, sq, rq, n in rows:
        lines.append(f"{name:12} {pq:8.4f} {sq:8.4f} {rq:8.4f} {n:4d}")
    lines.append("")
    lines.append(f"{'category':12} {'PQ':>8} {'SQ':>8} {'RQ':>8} "
                 f"{'TP':>4} {'FP':>4} {'FN':>4}")
    for cat in sorted(report.per_category):
        s = report.per_category[cat]
        name = categories.by_id[cat].name if cat in categories else str(cat)
        lines.append(f"{name:12} {s.pq:8.4f} {s.sq:8.4f} {s.rq:8.4f} "
                     f"{s.tp:4d} {s.fp:4d} {s.fn:4d}")
    return "\n".join(lines)


def write_report_kv(report, path):
    """Machine-readable key=value dump mirroring the headline columns."""
    keys = [("PQ", report.pq), ("PQ_th", report.pq_things),
            ("PQ_st", report.pq_stuff), ("SQ", report.sq), ("RQ", report.rq)]
    with open(path, "w") as fh:
        for k, v in keys:
            fh.write(f"{k}={v:.6f}\n")
