"""Combine scored instance masks with a semantic map into one panoptic labeling.

Overlaps between instances are resolved claim-by-claim in descending score
order; a later instance keeps only unclaimed pixels and is dropped when too
little of it survives. Category relations override the score order: a
candidate whose category must never be overlapped by an earlier claimant
takes its pixels back from that claimant. Unclaimed pixels then fall to the
semantic prediction where it names a stuff category, with small stuff
regions absorbed into their largest stuff neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panoptic import VOID, PanopticMap


@dataclass
class InstancePrediction:
    mask: np.ndarray  # (H, W); boolean once thresholded
    class_id: int
    score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 2:
            raise ValueError(f"instance mask must be 2-D, got shape {self.mask.shape}")


def resolve_overlaps(instances, categories=None, keep_fraction=0.5):
    """Reduce overlapping instance masks to disjoint claims.

    Instances are processed by descending score (ties: larger area, then
    lower class id). Each claims its still-free pixels, plus any pixels held
    by an earlier claimant whose category appears in the candidate's
    ``never_overlapped_by`` protections. Candidates whose claimable fraction
    falls below ``keep_fraction`` are discarded whole.

    Returns [(instance, final_mask)] in claim order, empties removed.
    """
    instances = [i for i in instances if i.mask.any()]
    if not instances:
        return []
    shape = instances[0].mask.shape
    for inst in instances:
        if inst.mask.dtype != bool:
            raise ValueError("resolve_overlaps expects thresholded boolean masks")
        if inst.mask.shape != shape:
            raise ValueError("instance masks disagree on image shape")

    order = sorted(
        range(len(instances)),
        key=lambda i: (-instances[i].score, -int(instances[i].mask.sum()),
                       instances[i].class_id),
    )
    owner = np.full(shape, -1, dtype=np.int64)  # index into `kept`
    kept = []
    for idx in order:
        inst = instances[idx]
        avail = inst.mask & (owner == -1)
        if categories is not None and inst.class_id in categories:
            protections = categories.by_id[inst.class_id].never_overlapped_by
            if protections:
                for rank, earlier in enumerate(kept):
                    if earlier.class_id in protections:
                        avail |= inst.mask & (owner == rank)
        if int(avail.sum()) / int(inst.mask.sum()) < keep_fraction:
            continue
        owner[avail] = len(kept)
        kept.append(inst)

    out = []
    for rank, inst in enumerate(kept):
        final = owner == rank
        if final.any():
            out.append((inst, final))
    return out


def _connected_components(mask):
    """4-connected component labels (-1 outside the mask)."""
    labels = np.full(mask.shape, -1, dtype=np.int64)
    current = 0
    todo = mask.copy()
    while todo.any():
        seed = np.unravel_index(int(np.argmax(todo)), mask.shape)
        comp = np.zeros_like(mask)
        comp[seed] = True
        while True:
            grow = comp.copy()
            grow[1:, :] |= comp[:-1, :]
            grow[:-1, :] |= comp[1:, :]
            grow[:, 1:] |= comp[:, :-1]
            grow[:, :-1] |= comp[:, 1:]
            grow &= mask
            if (grow == comp).all():
                break
            comp = grow
        labels[comp] = current
        todo &= ~comp
        current += 1
    return labels, current


def _neighbours(mask):
    out = np.zeros_like(mask)
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out & ~mask


def merge_panoptic(resolved, semantic, categories, stuff_area_min=64):
    """Write resolved instances first, then stuff from the semantic argmax map.

    ``resolved`` comes from :func:`resolve_overlaps`; ``semantic`` is a
    per-pixel category-id map covering the whole image. Thing pixels win over
    the semantic prediction. Stuff regions (connected components) smaller
    than ``stuff_area_min`` are relabeled to the largest adjacent stuff
    segment, or void when nothing stuff borders them.
    """
    semantic = np.asarray(semantic)
    cat = np.zeros(semantic.shape, np.int32)
    inst = np.zeros(semantic.shape, np.int32)
    for i, (pred, mask) in enumerate(resolved, start=1):
        cat[mask] = pred.class_id
        inst[mask] = i

    stuff_ids = set(categories.stuff_ids())
    free = cat == VOID
    for sid in stuff_ids:
        cat[free & (semantic == sid)] = sid

    # absorb small stuff components into their biggest stuff neighbour
    stuff_mask = np.isin(cat, list(stuff_ids))
    segment_area = {sid: int((cat == sid).sum()) for sid in stuff_ids}
    for sid in sorted(stuff_ids):
        region = cat == sid
        if not region.any():
            continue
        labels, count = _connected_components(region)
        for comp_id in range(count):
            comp = labels == comp_id
            if int(comp.sum()) >= stuff_area_min:
                continue
            ring = _neighbours(comp) & stuff_mask & ~region
            candidates = [int(c) for c in np.unique(cat[ring]) if c in stuff_ids]
            if candidates:
                target = max(candidates, key=lambda c: segment_area[c])
                cat[comp] = target
            else:
                cat[comp] = VOID

    out = PanopticMap(cat, inst)
    out.check_partition(categories)
    return out


def fuse(instances, semantic, categories, keep_fraction=0.5, stuff_area_min=64,
         mask_threshold=0.5):
    """resolve_overlaps + merge_panoptic over probability or boolean masks."""
    binary = []
    for inst in instances:
        mask = inst.mask
        if mask.dtype != bool:
            mask = np.asarray(mask) >= mask_threshold
        if mask.any():
            binary.append(InstancePrediction(mask, inst.class_id, inst.score))
    resolved = resolve_overlaps(binary, categories, keep_fraction=keep_fraction)
    return merge_panoptic(resolved, semantic, categories,
                          stuff_area_min=stuff_area_min)
