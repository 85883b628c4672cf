"""Shared panoptic domain types: category metadata and per-pixel labelings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOID = 0


@dataclass
class CategoryMeta:
    """One category plus its overlap protections.

    ``never_overlapped_by`` lists category ids that are not allowed to claim
    this category's pixels during overlap resolution.
    """

    id: int
    name: str
    is_thing: bool
    never_overlapped_by: set = field(default_factory=set)


class Categories:
    """Indexed category table; void (id 0) is implicit and never listed."""

    def __init__(self, metas):
        self.by_id = {}
        for m in metas:
            if m.id == VOID:
                raise ValueError("category id 0 is reserved for void")
            if m.id in self.by_id:
                raise ValueError(f"duplicate category id {m.id}")
            self.by_id[m.id] = m
        self.by_name = {m.name: m for m in self.by_id.values()}
        if len(self.by_name) != len(self.by_id):
            raise ValueError("duplicate category names")

    def __iter__(self):
        return iter(sorted(self.by_id.values(), key=lambda m: m.id))

    def __contains__(self, cat_id):
        return cat_id in self.by_id

    def __len__(self):
        return len(self.by_id)

    def is_thing(self, cat_id):
        return self.by_id[cat_id].is_thing

    def thing_ids(self):
        return [m.id for m in self if m.is_thing]

    def stuff_ids(self):
        return [m.id for m in self if not m.is_thing]

    def validate_relations(self):
        for m in self:
            for other in m.never_overlapped_by:
                if other not in self.by_id:
                    raise ValueError(
                        f"relation on {m.name!r} references unknown category id "
                        f"{other}"
                    )


def load_relations(path, categories):
    """Apply a relation table file to ``categories``.

    Each non-comment line reads ``<protected> never_overlapped_by <claimant>``,
    category names resolved against the table.
    """
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[1] != "never_overlapped_by":
                raise ValueError(
                    f"{path}:{lineno}: expected '<category> never_overlapped_by "
                    f"<category>', got {raw.strip()!r}"
                )
            protected, _, claimant = parts
            for nm in (protected, claimant):
                if nm not in categories.by_name:
                    raise ValueError(f"{path}:{lineno}: unknown category {nm!r}")
            categories.by_name[protected].never_overlapped_by.add(
                categories.by_name[claimant].id
            )
    categories.validate_relations()
    return categories


class PanopticMap:
    """Per-pixel (category id, instance id) labeling.

    Thing pixels carry instance ids >= 1, stuff pixels 0, void pixels
    (category 0) also 0.
    """

    def __init__(self, category, instance):
        category = np.asarray(category, dtype=np.int32)
        instance = np.asarray(instance, dtype=np.int32)
        if category.shape != instance.shape or category.ndim != 2:
            raise ValueError(
                f"category {category.shape} and instance {instance.shape} must be "
                "equal 2-D shapes"
            )
        self.category = category
        self.instance = instance

    @property
    def shape(self):
        return self.category.shape

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width), np.int32),
                   np.zeros((height, width), np.int32))

    def segments(self):
        """Unique (category_id, instance_id) pairs with areas, void excluded."""
        keys = self.category.astype(np.int64) * (1 << 20) + self.instance
        ids, counts = np.unique(keys, return_counts=True)
        out = []
        for k, a in zip(ids, counts):
            cat = int(k >> 20)
            if cat == VOID:
                continue
            out.append((cat, int(k & ((1 << 20) - 1)), int(a)))
        return out

    def segment_mask(self, cat_id, inst_id):
        return (self.category == cat_id) & (self.instance == inst_id)

    def check_partition(self, categories):
        """Raise unless the labeling satisfies the panoptic invariants."""
        cats = np.unique(self.category)
        for cat in cats:
            if cat == VOID:
                if np.any(self.instance[self.category == VOID] != 0):
                    raise AssertionError("void pixels must carry instance id 0")
                continue
            if cat not in categories:
                raise AssertionError(f"unknown category id {int(cat)} in map")
            inst = self.instance[self.category == cat]
            if categories.is_thing(int(cat)):
                if np.any(inst < 1):
                    raise AssertionError(
                        f"thing category {int(cat)} has pixels without an "
                        "instance id"
                    )
            else:
                if np.any(inst != 0):
                    raise AssertionError(
                        f"stuff category {int(cat)} has nonzero instance ids"
                    )
        return True

    def __eq__(self, other):
        return (isinstance(other, PanopticMap)
                and np.array_equal(self.category, other.category)
                and np.array_equal(self.instance, other.instance))

    def copy(self):
        return PanopticMap(self.category.copy(), self.instance.copy())
