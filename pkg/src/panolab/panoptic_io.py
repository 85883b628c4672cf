"""Panoptic interchange i/o, synthetic scene generation, and heatmap rendering.

Annotations follow the COCO panoptic layout: a JSON document with ``images``,
``annotations`` and ``categories``, next to per-image PNG id maps encoding
segment id = R + 256*G + 65536*B (0 = void). Each segment record additionally
stores its instance id so that decode(encode(map)) is an exact identity.

Scenes are deterministic functions of a seed: three horizontal stuff bands
(sky / grass / road analogues) under 1..n coloured things (disks, blocks,
wedges) composited with a recorded occlusion order. Ground truth is exact by
construction.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .panoptic import VOID, Categories, CategoryMeta, PanopticMap
from .roi import RoI, roi_align
from .tensor import Tensor

log = logging.getLogger(__name__)

STUFF_COLORS = {
    "sky": (0.38, 0.56, 0.90),
    "grass": (0.24, 0.62, 0.28),
    "road": (0.46, 0.44, 0.46),
}
THING_COLORS = {
    "disk": (0.88, 0.20, 0.18),
    "block": (0.94, 0.80, 0.16),
    "wedge": (0.78, 0.22, 0.82),
}


def default_categories():
    """The synthetic dataset's category table: 3 stuff bands, 3 thing shapes."""
    return Categories([
        CategoryMeta(1, "sky", False),
        CategoryMeta(2, "grass", False),
        CategoryMeta(3, "road", False),
        CategoryMeta(4, "disk", True),
        CategoryMeta(5, "block", True),
        CategoryMeta(6, "wedge", True),
    ])


# ---------------------------------------------------------------------------
# COCO-panoptic codec
# ---------------------------------------------------------------------------

def encode_panoptic(pmap):
    """PanopticMap -> (id_image uint8 HxWx3, segment records).

    Segment ids are assigned in raster order of first occurrence, starting
    at 1; void stays 0. Records carry the COCO fields (id, category_id, area,
    bbox, iscrowd) plus the instance id needed for exact inversion.
    """
    cat, inst = pmap.category, pmap.instance
    h, w = cat.shape
    keys = cat.astype(np.int64) * (1 << 20) + inst
    flat = keys.reshape(-1)
    assigned = {}
    records = []
    # raster order of first occurrence
    uniq, first = np.unique(flat, return_index=True)
    for pos in np.argsort(first):
        key = int(uniq[pos])
        c, i = key >> 20, key & ((1 << 20) - 1)
        if c == VOID:
            assigned[key] = 0
            continue
        sid = len(records) + 1
        assigned[key] = sid
        mask = keys == key
        ys, xs = np.nonzero(mask)
        records.append({
            "id": sid,
            "category_id": int(c),
            "area": int(mask.sum()),
            "bbox": [int(xs.min()), int(ys.min()),
                     int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)],
            "iscrowd": 0,
            "instance_id": int(i),
        })
    lut = np.vectorize(assigned.get, otypes=[np.int64])
    ids = lut(keys)
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0] = ids % 256
    img[..., 1] = (ids // 256) % 256
    img[..., 2] = ids // 65536
    return img, records


def decode_panoptic(id_image, records, categories=None):
    """(id_image, records) -> PanopticMap; integrity-checked both ways.

    Instance ids come from the records when present; otherwise stuff
    segments get 0 and things are numbered per category in record order
    (``categories`` required to tell them apart).
    """
    id_image = np.asarray(id_image)
    if id_image.ndim != 3 or id_image.shape[2] != 3:
        raise ValueError(f"id image must be HxWx3, got {id_image.shape}")
    ids = (id_image[..., 0].astype(np.int64)
           + 256 * id_image[..., 1].astype(np.int64)
           + 65536 * id_image[..., 2].astype(np.int64))
    present = set(np.unique(ids).tolist()) - {0}
    declared = {int(r["id"]) for r in records}
    if present != declared:
        missing = sorted(present - declared)
        spurious = sorted(declared - present)
        raise ValueError(
            f"segment id mismatch: in image but not records {missing}; "
            f"in records but not image {spurious}"
        )

    cat = np.zeros(ids.shape, np.int32)
    inst = np.zeros(ids.shape, np.int32)
    per_cat_counter = {}
    for rec in records:
        sid = int(rec["id"])
        cid = int(rec["category_id"])
        mask = ids == sid
        cat[mask] = cid
        if "instance_id" in rec:
            inst[mask] = int(rec["instance_id"])
        elif categories is not None and not categories.is_thing(cid):
            inst[mask] = 0
        else:
            per_cat_counter[cid] = per_cat_counter.get(cid, 0) + 1
            inst[mask] = per_cat_counter[cid]
    return PanopticMap(cat, inst)


def save_png(array, path):
    Image.fromarray(array).save(path)


def load_png(path):
    return np.asarray(Image.open(path))


def image_to_png(image):
    """(3, H, W) float in [0, 1] -> HxWx3 uint8."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    return (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)


def png_to_image(arr, dtype=np.float64):
    return (arr.astype(dtype) / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 64
    min_things: int = 1
    max_things: int = 4
    noise: float = 0.03
    shapes: tuple = ("disk", "block", "wedge")
    min_visible: int = 12

    def __post_init__(self):
        capacity = (self.size // 12) ** 2
        if self.max_things > capacity:
            raise SceneSpecError(
                f"{self.max_things} things exceed the capacity ({capacity}) of a "
                f"{self.size}x{self.size} canvas"
            )
        if self.min_things > self.max_things:
            raise SceneSpecError("min_things > max_things")


@dataclass
class SceneInstance:
    instance_id: int
    class_id: int
    box: tuple  # (x1, y1, x2, y2) continuous image coordinates


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) float
    pmap: PanopticMap
    instances: list


_SHAPE_TO_CAT = {"disk": 4, "block": 5, "wedge": 6}


def _draw_shape(shape, cx, cy, half, yy, xx):
    if shape == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
    if shape == "block":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half * 0.8)
    if shape == "wedge":
        # upright triangle: apex above, base below
        inside_y = (yy >= cy - half) & (yy <= cy + half)
        frac = (yy - (cy - half)) / (2.0 * half + 1e-9)
        return inside_y & (np.abs(xx - cx) <= half * np.clip(frac, 0, 1))
    raise SceneSpecError(f"unknown shape {shape!r}")


def generate_scene(spec):
    """Deterministic scene from a SceneSpec: same seed, same bytes."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    cat = np.zeros((s, s), np.int32)
    inst = np.zeros((s, s), np.int32)
    color = np.zeros((3, s, s), np.float64)

    # stuff bands, top to bottom: sky / grass / road
    b1 = int(rng.integers(s // 5, 2 * s // 5))
    b2 = int(rng.integers(3 * s // 5, 4 * s // 5))
    bands = [(0, b1, 1, "sky"), (b1, b2, 2, "grass"), (b2, s, 3, "road")]
    for y0, y1, cid, name in bands:
        cat[y0:y1, :] = cid
        for ch, v in enumerate(STUFF_COLORS[name]):
            color[ch, y0:y1, :] = v

    n_things = int(rng.integers(spec.min_things, spec.max_things + 1))
    drawn = []
    for k in range(n_things):
        shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        half = float(rng.uniform(5.0, 12.0))
        cx = float(rng.uniform(half + 2, s - half - 2))
        cy = float(rng.uniform(half + 2, s - half - 2))
        mask = _draw_shape(shape, cx, cy, half, yy, xx)
        cid = _SHAPE_TO_CAT[shape]
        base = np.array(THING_COLORS[shape])
        jitter = rng.uniform(-0.06, 0.06, size=3)
        drawn.append((mask, cid, base + jitter))

    next_id = 0
    instances = []
    for mask, cid, col in drawn:
        cat[mask] = cid
        # instance ids are provisional; re-numbered after visibility filtering
        next_id += 1
        inst[mask] = next_id
        for ch in range(3):
            color[ch][mask] = col[ch]

    final_instances = []
    renumber = np.zeros(next_id + 1, np.int32)
    kept = 0
    for pid in range(1, next_id + 1):
        visible = inst == pid
        area = int(visible.sum())
        if area < spec.min_visible:
            # absorbed by occlusion; hand its pixels to whatever covers them
            continue
        kept += 1
        renumber[pid] = kept
        ys, xs = np.nonzero(visible)
        box = (float(xs.min()), float(ys.min()),
               float(xs.max() + 1), float(ys.max() + 1))
        final_instances.append(SceneInstance(
            instance_id=kept, class_id=int(cat[ys[0], xs[0]]), box=box))
    was_thing = inst > 0
    inst = renumber[inst]
    # pixels of dropped (mostly-occluded) things fall back to the band beneath
    orphan = was_thing & (inst == 0)
    if orphan.any():
        band_cat = np.zeros((s, s), np.int32)
        for y0, y1, cid, _ in bands:
            band_cat[y0:y1, :] = cid
        cat[orphan] = band_cat[orphan]

    image = color + rng.normal(0.0, spec.noise, size=color.shape)
    image = np.clip(image, 0.0, 1.0)
    return Scene(image=image, pmap=PanopticMap(cat, inst), instances=final_instances)


def instance_rois(scene, image_scale=1.0):
    """Ground-truth RoIs (score 1) for a scene's visible instances."""
    rois = []
    for si in scene.instances:
        rois.append(RoI(batch_index=0, box=si.box, score=1.0,
                        class_id=si.class_id))
    return rois


def mask_target(pmap, instance, m):
    """m x m binary crop of one instance's visible mask, via roi_align geometry."""
    binary = (pmap.instance == instance.instance_id) \
        & (pmap.category == instance.class_id)
    feat = Tensor(binary.astype(np.float64)[None, None])
    roi = RoI(batch_index=0, box=instance.box, class_id=instance.class_id)
    crop = roi_align(feat, roi, m, spatial_scale=1.0)
    return (crop.data[0, 0] >= 0.5).astype(np.float64)


def scene_mask_targets(scene, m):
    """Per-instance m x m ground-truth mask crops for a whole scene."""
    return [mask_target(scene.pmap, si, m) for si in scene.instances]


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def write_dataset(root, scenes, categories, split="train"):
    """Write scenes as PNGs plus one COCO-panoptic JSON document."""
    img_dir = os.path.join(root, split, "images")
    pan_dir = os.path.join(root, split, "panoptic")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(pan_dir, exist_ok=True)
    doc = {"images": [], "annotations": [], "categories": [
        {"id": m.id, "name": m.name, "isthing": int(m.is_thing)}
        for m in categories
    ]}
    for i, scene in enumerate(scenes):
        name = f"{i:06d}"
        h, w = scene.pmap.shape
        save_png(image_to_png(scene.image), os.path.join(img_dir, name + ".png"))
        id_img, records = encode_panoptic(scene.pmap)
        save_png(id_img, os.path.join(pan_dir, name + ".png"))
        doc["images"].append({"id": i, "file_name": name + ".png",
                              "height": h, "width": w})
        doc["annotations"].append({"image_id": i, "file_name": name + ".png",
                                   "segments_info": records})
    with open(os.path.join(root, split, "annotations.json"), "w") as fh:
        json.dump(doc, fh)
    return os.path.join(root, split)


def read_dataset(split_dir):
    """Load a written split back into (image, PanopticMap, instances) scenes."""
    with open(os.path.join(split_dir, "annotations.json")) as fh:
        doc = json.load(fh)
    categories = Categories([
        CategoryMeta(c["id"], c["name"], bool(c["isthing"]))
        for c in doc["categories"]
    ])
    scenes = []
    by_id = {im["id"]: im for im in doc["images"]}
    for ann in doc["annotations"]:
        im = by_id[ann["image_id"]]
        image = png_to_image(load_png(os.path.join(split_dir, "images",
                                                   im["file_name"])))
        id_img = load_png(os.path.join(split_dir, "panoptic", ann["file_name"]))
        pmap = decode_panoptic(id_img, ann["segments_info"], categories)
        instances = []
        for rec in ann["segments_info"]:
            if not categories.is_thing(rec["category_id"]):
                continue
            mask = pmap.segment_mask(rec["category_id"], rec["instance_id"])
            ys, xs = np.nonzero(mask)
            box = (float(xs.min()), float(ys.min()),
                   float(xs.max() + 1), float(ys.max() + 1))
            instances.append(SceneInstance(instance_id=rec["instance_id"],
                                           class_id=rec["category_id"], box=box))
        instances.sort(key=lambda s: s.instance_id)
        scenes.append(Scene(image=image, pmap=pmap, instances=instances))
    return scenes, categories


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def _palette():
    """256-step blue -> neutral -> red lookup table."""
    t = np.linspace(0.0, 1.0, 256)[:, None]
    blue = np.array([45, 70, 225], np.float64)
    mid = np.array([235, 235, 235], np.float64)
    red = np.array([215, 45, 40], np.float64)
    lo = blue + (mid - blue) * np.clip(t * 2, 0, 1)
    hi = mid + (red - mid) * np.clip(t * 2 - 1, 0, 1)
    return np.where(t < 0.5, lo, hi).round().astype(np.uint8)


_PALETTE = _palette()


def render_heatmap(values):
    """Min-max normalized colour rendering of a single-channel map.

    Accepts (H, W) or (1, 1, H, W); constant maps render mid-palette and are
    logged. Returns HxWx3 uint8.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[:2] != (1, 1):
            raise ValueError(f"expected a single-channel map, got {arr.shape}")
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0:
        log.warning("constant heatmap input (value %.6g); rendering mid-palette", lo)
        idx = np.full(arr.shape, 127, dtype=np.int64)
    else:
        idx = np.clip(((arr - lo) / (hi - lo)) * 255.0, 0, 255).round().astype(np.int64)
    return _PALETTE[idx]
