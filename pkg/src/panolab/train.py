"""Joint loss, SGD with momentum, the training loop, evaluation and ablation.

The loss is a weighted sum of four terms: binary objectness over rasterized
box targets per pyramid level, per-RoI classification cross-entropy, per-RoI
mask binary cross-entropy, and per-pixel semantic cross-entropy. Weight
profiles ship for the two default lambda sets {1, 1, 1, 0.3} and
{1, 0.75, 1, 1}.

Everything is deterministic given (seed, config, dataset): parameter init,
batch order and evaluation all draw from seeded generators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .fusion import InstancePrediction, fuse
from .metrics import PQStats, accumulate_stats, compute_pq
from .model import LEVELS, STRIDES, Model, ModelConfig, level_sizes
from .panoptic_io import generate_scene, instance_rois, mask_target, SceneSpec
from .tensor import (
    Tensor,
    add_n,
    affine,
    bce_with_logits,
    bilinear_resize,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Coefficients of the four loss terms."""

    rpn: float = 1.0
    rcnn: float = 1.0
    mask: float = 1.0
    seg: float = 0.3

    @classmethod
    def profile(cls, name):
        if name == "coco":
            return cls(1.0, 1.0, 1.0, 0.3)
        if name == "cityscapes":
            return cls(1.0, 0.75, 1.0, 1.0)
        raise ValueError(f"unknown loss profile {name!r}")


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    batch_size: int = 1
    seed: int = 0
    lr_milestones: tuple = (0.8, 0.95)  # fractions of total steps, 10x decay each
    lr_factor: float = 0.1
    eval_every: int = 250
    stop_at_pq: float | None = None  # early stop once eval PQ reaches this

    def __post_init__(self):
        if isinstance(self.lr_milestones, list):
            self.lr_milestones = tuple(self.lr_milestones)


class SGD:
    """Plain SGD with momentum, L2 weight decay, and stepwise 10x lr decay."""

    def __init__(self, params, cfg):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.milestones = sorted(int(round(f * cfg.steps))
                                 for f in cfg.lr_milestones)
        self.step_count = 0

    @property
    def lr(self):
        passed = sum(1 for m in self.milestones if self.step_count >= m > 0)
        return self.cfg.lr * (self.cfg.lr_factor ** passed)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        lr = self.lr
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.cfg.weight_decay * p.data
            v *= self.cfg.momentum
            v += g
            p.data -= lr * v
        self.step_count += 1


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------

def thing_index(categories):
    """Map thing category id -> contiguous class index for the class head."""
    return {cid: i for i, cid in enumerate(categories.thing_ids())}


def semantic_index(categories):
    """Map category id -> contiguous semantic class index (stuff + things)."""
    ids = sorted(categories.by_id)
    return {cid: i for i, cid in enumerate(ids)}


@dataclass
class SceneTargets:
    rpn: dict            # level -> (1, 1, h, w) float {0, 1}
    class_ids: list      # per RoI, int class index
    masks: list          # per RoI, (m, m) float {0, 1}
    semantic: np.ndarray  # (1, hs, ws) int class index, -1 ignored


def build_targets(scene, categories, cfg):
    """Rasterize a scene's ground truth for every loss term."""
    h, w = scene.pmap.shape
    boxes = [si.box for si in scene.instances]
    sizes = level_sizes(h, w)

    rpn = {}
    for lvl in LEVELS:
        stride = STRIDES[lvl]
        hl, wl = sizes[lvl]
        t = np.zeros((1, 1, hl, wl))
        cy = (np.arange(hl) + 0.5) * stride
        cx = (np.arange(wl) + 0.5) * stride
        for (x1, y1, x2, y2) in boxes:
            inside = ((cy[:, None] >= y1) & (cy[:, None] < y2)
                      & (cx[None, :] >= x1) & (cx[None, :] < x2))
            t[0, 0][inside] = 1.0
        rpn[lvl] = t

    tidx = thing_index(categories)
    class_ids = [tidx[si.class_id] for si in scene.instances]
    masks = [mask_target(scene.pmap, si, cfg.mask_size) for si in scene.instances]

    sidx = semantic_index(categories)
    stride = STRIDES[LEVELS[0]]
    hs, ws = sizes[LEVELS[0]]
    ys = np.minimum(np.arange(hs) * stride + stride // 2, h - 1)
    xs = np.minimum(np.arange(ws) * stride + stride // 2, w - 1)
    sub = scene.pmap.category[np.ix_(ys, xs)]
    sem = np.full(sub.shape, -1, dtype=np.int64)
    for cid, ci in sidx.items():
        sem[sub == cid] = ci
    return SceneTargets(rpn=rpn, class_ids=class_ids, masks=masks,
                        semantic=sem[None])


def combine_losses(components, weights):
    """Weighted sum L = w_rpn*rpn + w_rcnn*rcnn + w_mask*mask + w_seg*seg."""
    terms = [affine(components["rpn"], weights.rpn),
             affine(components["rcnn"], weights.rcnn),
             affine(components["mask"], weights.mask),
             affine(components["seg"], weights.seg)]
    return add_n(terms)


def _zero_scalar():
    return Tensor(np.zeros((1, 1, 1, 1)))


def joint_loss(outputs, targets, weights):
    """Return (total loss Tensor, component Tensors by name)."""
    rpn_terms = [bce_with_logits(outputs.objectness[lvl], targets.rpn[lvl])
                 for lvl in LEVELS]
    l_rpn = affine(add_n(rpn_terms), 1.0 / len(rpn_terms))

    if outputs.class_logits:
        cls_terms = [
            softmax_cross_entropy(logits, np.full((1, 1, 1), cid, np.int64))
            for logits, cid in zip(outputs.class_logits, targets.class_ids)
        ]
        l_rcnn = affine(add_n(cls_terms), 1.0 / len(cls_terms))
        mask_terms = [
            bce_with_logits(logits, m[None, None])
            for logits, m in zip(outputs.mask_logits, targets.masks)
        ]
        l_mask = affine(add_n(mask_terms), 1.0 / len(mask_terms))
    else:
        l_rcnn = _zero_scalar()
        l_mask = _zero_scalar()

    l_seg = softmax_cross_entropy(outputs.semantic_logits, targets.semantic)

    components = {"rpn": l_rpn, "rcnn": l_rcnn, "mask": l_mask, "seg": l_seg}
    return combine_losses(components, weights), components


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def make_split(n_scenes, base_seed=0, size=64, **spec_kwargs):
    """Deterministic list of scenes: scene i is a pure function of base_seed+i."""
    return [generate_scene(SceneSpec(seed=base_seed + i, size=size,
                                     **spec_kwargs))
            for i in range(n_scenes)]


def default_splits(train_scenes=200, eval_scenes=50, size=64):
    train = make_split(train_scenes, base_seed=10_000, size=size)
    evals = make_split(eval_scenes, base_seed=90_000, size=size)
    return train, evals


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainRecord:
    step: int
    loss: float
    components: dict
    lr: float
    eval_pq: float | None = None


def train_step(model, scenes_with_targets, optimizer, weights):
    """One SGD update over a batch; returns (loss value, component values)."""
    optimizer.zero_grad()
    batch = len(scenes_with_targets)
    total_val = 0.0
    comp_vals = {"rpn": 0.0, "rcnn": 0.0, "mask": 0.0, "seg": 0.0}
    for scene, targets in scenes_with_targets:
        outputs = model.forward(scene.image[None], instance_rois(scene))
        total, components = joint_loss(outputs, targets, weights)
        for name, t in components.items():
            val = t.item()
            if not np.isfinite(val):
                raise RuntimeError(
                    f"non-finite {name} loss ({val}) at step "
                    f"{optimizer.step_count}"
                )
            comp_vals[name] += val / batch
        total_val += total.item() / batch
        affine(total, 1.0 / batch).backward()
    optimizer.step()
    return total_val, comp_vals


def train(model, train_scenes, categories, train_cfg, weights=None,
          eval_scenes=None, fusion_kwargs=None, progress=None):
    """Run the loop; returns the list of TrainRecord entries.

    When ``stop_at_pq`` is set and ``eval_scenes`` given, evaluation runs
    every ``eval_every`` steps and training stops once the target is met.
    """
    weights = weights or LossWeights.profile("coco")
    rng = np.random.default_rng(train_cfg.seed)
    targets = [build_targets(s, categories, model.cfg) for s in train_scenes]
    pairs = list(zip(train_scenes, targets))
    optimizer = SGD(model.parameters(), train_cfg)

    history = []
    order = []
    for step in range(train_cfg.steps):
        if len(order) < train_cfg.batch_size:
            order.extend(rng.permutation(len(pairs)).tolist())
        batch_idx = [order.pop() for _ in range(train_cfg.batch_size)]
        batch = [pairs[i] for i in batch_idx]
        loss, comps = train_step(model, batch, optimizer, weights)
        rec = TrainRecord(step=step, loss=loss, components=comps,
                          lr=optimizer.lr)

        due = (step + 1) % train_cfg.eval_every == 0 or step + 1 == train_cfg.steps
        if eval_scenes is not None and due:
            report = evaluate(model, eval_scenes, categories,
                              **(fusion_kwargs or {}))
            rec.eval_pq = report.pq
        history.append(rec)
        if progress:
            progress(rec)
        if (rec.eval_pq is not None and train_cfg.stop_at_pq is not None
                and rec.eval_pq >= train_cfg.stop_at_pq):
            log.info("stop target reached: PQ %.4f at step %d",
                     rec.eval_pq, step + 1)
            break
    return history


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def _sample_matrix(src_pos, n_src):
    """Rows of bilinear gather weights for arbitrary source positions."""
    m = np.zeros((len(src_pos), n_src))
    pos = np.clip(src_pos, 0.0, n_src - 1.0)
    lo = np.minimum(np.floor(pos).astype(np.int64), max(n_src - 2, 0))
    frac = pos - lo
    rows = np.arange(len(src_pos))
    m[rows, lo] += 1.0 - frac
    if n_src > 1:
        m[rows, lo + 1] += frac
    return m


def paste_mask(prob, box, height, width):
    """Place an m x m probability patch into a zero canvas under its box."""
    m = prob.shape[0]
    x1, y1, x2, y2 = box
    c0, c1 = max(0, int(np.floor(x1))), min(width, int(np.ceil(x2)))
    r0, r1 = max(0, int(np.floor(y1))), min(height, int(np.ceil(y2)))
    canvas = np.zeros((height, width))
    if c1 <= c0 or r1 <= r0:
        return canvas
    # pixel centers mapped into mask coordinates (half-pixel convention)
    us = ((np.arange(c0, c1) + 0.5 - x1) / (x2 - x1)) * m - 0.5
    vs = ((np.arange(r0, r1) + 0.5 - y1) / (y2 - y1)) * m - 0.5
    rows = _sample_matrix(vs, m)
    cols = _sample_matrix(us, m)
    canvas[r0:r1, c0:c1] = rows @ prob @ cols.T
    return canvas


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def predict_scene(model, scene, categories):
    """Forward + decode: per-instance probability masks and the semantic map."""
    outputs = model.forward(scene.image[None], instance_rois(scene))
    h, w = scene.pmap.shape
    things = categories.thing_ids()

    instances = []
    for r, cl, ml in zip(outputs.rois, outputs.class_logits, outputs.mask_logits):
        probs = _softmax(cl.data.reshape(-1))
        k = int(np.argmax(probs))
        mask_prob = 1.0 / (1.0 + np.exp(-ml.data[0, 0]))
        full = paste_mask(mask_prob, r.box, h, w)
        instances.append(InstancePrediction(mask=full, class_id=things[k],
                                            score=float(probs[k])))

    sem_full = bilinear_resize(outputs.semantic_logits, h, w).data[0]
    sidx = semantic_index(categories)
    inv = {v: k for k, v in sidx.items()}
    arg = sem_full.argmax(axis=0)
    semantic = np.vectorize(inv.get)(arg).astype(np.int32)
    return instances, semantic, outputs


def evaluate(model, scenes, categories, keep_fraction=0.5, stuff_area_min=64,
             mask_threshold=0.5, collect_attention=False):
    """Fuse predictions per scene and aggregate PQ against ground truth."""
    stats = PQStats()
    attention_dumps = []
    for scene in scenes:
        instances, semantic, outputs = predict_scene(model, scene, categories)
        pred = fuse(instances, semantic, categories,
                    keep_fraction=keep_fraction,
                    stuff_area_min=stuff_area_min,
                    mask_threshold=mask_threshold)
        accumulate_stats(pred, scene.pmap, categories, stats)
        if collect_attention:
            attention_dumps.append((outputs.pam_maps, outputs.mam_maps))
    report = compute_pq(stats, categories)
    if collect_attention:
        return report, attention_dumps
    return report


def evaluate_oracle(scenes, categories, **fusion_kwargs):
    """Feed ground truth through fusion + metrics; sanity ceiling (PQ = 1)."""
    stats = PQStats()
    for scene in scenes:
        instances = []
        for si in scene.instances:
            mask = scene.pmap.segment_mask(si.class_id, si.instance_id)
            instances.append(InstancePrediction(mask=mask, class_id=si.class_id,
                                                score=1.0))
        pred = fuse(instances, scene.pmap.category, categories, **fusion_kwargs)
        accumulate_stats(pred, scene.pmap, categories, stats)
    return compute_pq(stats, categories)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("sep", dict(e2e=False, pam=False, mam=False, reweight=False)),
    ("e2e", dict(e2e=True, pam=False, mam=False, reweight=False)),
    ("PAM", dict(e2e=True, pam=True, mam=False, reweight=False)),
    ("PAM_r", dict(e2e=True, pam=True, mam=False, reweight=True)),
    ("MAM", dict(e2e=True, pam=False, mam=True, reweight=False)),
    ("MAM_r", dict(e2e=True, pam=False, mam=True, reweight=True)),
    ("full", dict(e2e=True, pam=True, mam=True, reweight=True)),
)


@dataclass
class AblationRow:
    name: str
    flags: dict
    pq_values: list
    pq_things_values: list
    pq_stuff_values: list
    num_parameters: int

    @staticmethod
    def _mean_sd(values):
        arr = np.asarray(values)
        return float(arr.mean()), float(arr.std())

    @property
    def pq(self):
        return self._mean_sd(self.pq_values)


def run_ablation(train_scenes, eval_scenes, categories, base_cfg, train_cfg,
                 seeds=(0, 1, 2), rows=ABLATION_ROWS, weights=None,
                 progress=None):
    """Train and evaluate each flag row over the seeds; orderings are reported,
    never asserted."""
    results = []
    for name, flags in rows:
        pqs, pqt, pqs_st = [], [], []
        n_params = 0
        for seed in seeds:
            cfg_kwargs = {**base_cfg.__dict__, **flags, "seed": seed}
            cfg = ModelConfig(**cfg_kwargs)
            model = Model(cfg)
            n_params = model.num_parameters()
            tc = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
            train(model, train_scenes, categories, tc, weights=weights)
            report = evaluate(model, eval_scenes, categories)
            pqs.append(report.pq)
            pqt.append(report.pq_things)
            pqs_st.append(report.pq_stuff)
            if progress:
                progress(name, seed, report.pq)
        results.append(AblationRow(name=name, flags=flags, pq_values=pqs,
                                   pq_things_values=pqt,
                                   pq_stuff_values=pqs_st,
                                   num_parameters=n_params))
    return results


def render_ablation(rows):
    """Aligned text table of the flag grid with per-row PQ mean and spread."""
    def mark(b):
        return "x" if b else "-"

    lines = [f"{'method':8} {'PAM':>4} {'MAM':>4} {'rewt':>5} "
             f"{'PQ':>16} {'PQ_th':>16} {'PQ_st':>16} {'params':>9}"]
    for row in rows:
        pq_m, pq_s = AblationRow._mean_sd(row.pq_values)
        th_m, th_s = AblationRow._mean_sd(row.pq_things_values)
        st_m, st_s = AblationRow._mean_sd(row.pq_stuff_values)
        lines.append(
            f"{row.name:8} {mark(row.flags['pam']):>4} {mark(row.flags['mam']):>4} "
            f"{mark(row.flags['reweight']):>5} "
            f"{pq_m:8.4f} ±{pq_s:6.4f} {th_m:8.4f} ±{th_s:6.4f} "
            f"{st_m:8.4f} ±{st_s:6.4f} {row.num_parameters:9d}"
        )
    return "\n".join(lines)
