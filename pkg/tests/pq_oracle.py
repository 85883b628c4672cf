"""Brute-force panoptic-quality oracle.

Deliberately naive and independent of the library pipeline: segments are
materialized as boolean masks, every (prediction, ground truth) pair is
compared with direct pixel counting, and the metric terms are re-derived
from first principles. Used to validate panolab.metrics on random maps.
"""

import numpy as np

VOID = 0


def oracle_segments(pmap, stuff_ids):
    """(category, instance) -> bool mask, stuff merged per category, void dropped."""
    cat, inst = pmap.category, pmap.instance
    segs = {}
    for c in np.unique(cat):
        c = int(c)
        if c == VOID:
            continue
        if c in stuff_ids:
            segs[(c, 0)] = cat == c
        else:
            region = cat == c
            for i in np.unique(inst[region]):
                segs[(c, int(i))] = region & (inst == i)
    return segs


def oracle_iou(pmask, gmask, gt_void):
    """IoU with ground-truth void pixels removed from the union."""
    inter = int((pmask & gmask).sum())
    union = int(pmask.sum()) + int(gmask.sum()) - inter - int((pmask & gt_void).sum())
    return inter / union if union > 0 else 0.0


def oracle_match(pred_segs, gt_segs, gt_void):
    """All same-category pairs with IoU > 0.5 (provably a unique matching)."""
    matches = {}
    for (pc, pi), pmask in pred_segs.items():
        for (gc, gi), gmask in gt_segs.items():
            if pc != gc:
                continue
            iou = oracle_iou(pmask, gmask, gt_void)
            if iou > 0.5:
                matches[((pc, pi), (gc, gi))] = iou
    return matches


def oracle_all_matchings(pred_segs, gt_segs, gt_void):
    """Every maximal one-to-one matching among >0.5-IoU pairs, by enumeration."""
    pairs = list(oracle_match(pred_segs, gt_segs, gt_void).keys())
    best = []
    n = len(pairs)
    for bits in range(1 << n):
        chosen = [pairs[i] for i in range(n) if bits & (1 << i)]
        preds = [p for p, _ in chosen]
        gts = [g for _, g in chosen]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            continue
        # maximal: no unused pair can be added
        extendable = any(
            p not in preds and g not in gts for p, g in pairs
        )
        if not extendable:
            best.append(frozenset(chosen))
    return set(best)


def oracle_stats(pred_map, gt_map, stuff_ids):
    """Per-category (tp, fp, fn, iou_sum) from scratch."""
    gt_void = gt_map.category == VOID
    pred_segs = oracle_segments(pred_map, stuff_ids)
    gt_segs = oracle_segments(gt_map, stuff_ids)
    matches = oracle_match(pred_segs, gt_segs, gt_void)

    stats = {}

    def bucket(cat):
        return stats.setdefault(cat, [0, 0, 0, 0.0])

    matched_pred = set()
    matched_gt = set()
    for ((pc, pi), (gc, gi)), iou in matches.items():
        b = bucket(pc)
        b[0] += 1
        b[3] += iou
        matched_pred.add((pc, pi))
        matched_gt.add((gc, gi))
    for key, mask in pred_segs.items():
        if key in matched_pred:
            continue
        # mostly-void predictions are not penalized
        if int((mask & gt_void).sum()) / int(mask.sum()) > 0.5:
            continue
        bucket(key[0])[1] += 1
    for key in gt_segs:
        if key not in matched_gt:
            bucket(key[0])[2] += 1
    return stats


def oracle_scores(stats_by_cat):
    """Per-category and mean (pq, sq, rq); categories with tp+fp+fn == 0 skipped."""
    per_cat = {}
    for cat, (tp, fp, fn, iou_sum) in stats_by_cat.items():
        if tp + fp + fn == 0:
            continue
        sq = iou_sum / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_cat[cat] = (sq * rq, sq, rq)
    if per_cat:
        means = tuple(
            sum(v[i] for v in per_cat.values()) / len(per_cat) for i in range(3)
        )
    else:
        means = (0.0, 0.0, 0.0)
    return per_cat, means


def random_panoptic_map(rng, size=16, max_segments=6, thing_ids=(4, 5, 6),
                        stuff_ids=(1, 2, 3), void_prob=0.2):
    """A random labeling built from overlapping rectangles; returns a PanopticMap."""
    from panolab.panoptic import PanopticMap

    cat = np.zeros((size, size), np.int32)
    inst = np.zeros((size, size), np.int32)
    if rng.random() < 0.5:
        base = int(rng.choice(stuff_ids))
        cat[...] = base
    n = rng.integers(0, max_segments + 1)
    next_inst = 1
    for _ in range(n):
        y0, x0 = rng.integers(0, size, 2)
        hgt, wid = rng.integers(1, size // 2 + 1, 2)
        sl = (slice(y0, min(size, y0 + hgt)), slice(x0, min(size, x0 + wid)))
        r = rng.random()
        if r < void_prob:
            cat[sl] = VOID
            inst[sl] = 0
        elif r < 0.6:
            cat[sl] = int(rng.choice(stuff_ids))
            inst[sl] = 0
        else:
            cat[sl] = int(rng.choice(thing_ids))
            inst[sl] = next_inst
            next_inst += 1
    # things partially painted over may survive as several disconnected chunks;
    # that is fine for metric purposes (a segment is just a pixel set)
    return PanopticMap(cat, inst)
