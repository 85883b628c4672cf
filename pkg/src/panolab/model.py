"""Miniature two-branch panoptic network.

A small strided backbone feeds a four-level feature pyramid (strides 4..32)
shared by three heads:

* an RPN-style branch producing per-level objectness logits, whose features
  also drive proposal attention;
* a foreground branch that crops each RoI with roi_align and predicts a
  class distribution plus an m x m mask;
* a background branch of per-level light heads refined by proposal
  attention, then mask attention over the roi_upsample-scattered predicted
  masks, summed across levels into per-pixel semantic logits.

RoIs are supplied externally (ground-truth boxes during training and
evaluation); no box regression or proposal pruning happens here. With
``e2e=False`` the foreground and background branches get disjoint backbone
copies, which doubles the parameter census and severs every cross branch
connection (attention is rejected in that mode).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention, roi as roi_ops
from .attention import AttentionHead, he_init
from .roi import MaskPatch, assign_levels
from .tensor import (
    Param,
    Tensor,
    add_n,
    bilinear_resize,
    conv3x3,
    global_avg_pool,
    group_norm,
    pointwise_conv,
    relu,
    sigmoid,
)

LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


def level_sizes(height, width):
    """Feature-map extents per level for a given image size.

    Follows the backbone's padded stride-2 arithmetic, (n - 1) // 2 + 1 per
    halving, so tiny images still give valid (>= 1) extents.
    """
    h, w = (height - 1) // 2 + 1, (width - 1) // 2 + 1  # stem
    sizes = {}
    for lvl in LEVELS:
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        sizes[lvl] = (h, w)
    return sizes


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    level_widths: tuple = (16, 32, 64, 64)  # backbone widths, levels 2..5
    fpn_width: int = 32
    rpn_width: int = 32       # RPN feature channels consumed by attention
    attn_hidden: int = 64     # hidden width of the attention conv heads
    semantic_width: int = 32  # background-branch feature channels
    mask_channels: int = 1    # channels of the scattered mask canvas
    mask_size: int = 14
    gn_groups: int = 8
    num_things: int = 3
    num_stuff: int = 3
    e2e: bool = True
    pam: bool = True
    mam: bool = True
    reweight: bool = True
    scatter_probs: bool = True  # scatter sigmoid(mask logits) rather than logits
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.level_widths, list):
            self.level_widths = tuple(self.level_widths)
        if self.mask_size not in (14, 28):
            raise ValueError(f"mask_size must be 14 or 28, got {self.mask_size}")
        if (self.pam or self.mam) and not self.e2e:
            raise ValueError(
                "attention couples the branches and needs a shared backbone; "
                "enable e2e or disable pam/mam"
            )
        if self.semantic_width % self.gn_groups:
            raise ValueError(
                f"semantic_width ({self.semantic_width}) must be divisible by "
                f"gn_groups ({self.gn_groups})"
            )

    @property
    def num_semantic(self):
        return self.num_things + self.num_stuff


@dataclass
class ModelOutputs:
    objectness: dict          # level -> Tensor (1, 1, h, w)
    rpn_features: dict        # level -> Tensor (1, C_r, h, w)
    mask_logits: list         # per RoI, Tensor (1, 1, m, m)
    class_logits: list        # per RoI, Tensor (1, K_things, 1, 1)
    semantic_logits: Tensor   # (1, K_sem, H/4, W/4)
    rois: list
    pam_maps: dict = field(default_factory=dict)   # level -> np (h, w) bg weight
    mam_maps: dict = field(default_factory=dict)


class _ConvGN:
    """conv3x3 -> group norm -> relu block."""

    def __init__(self, c_in, c_out, gn_groups, rng, name, stride=1):
        self.stride = stride
        self.groups = min(gn_groups, c_out)
        self.w = Param(he_init(rng, c_out, c_in, 3, 3), f"{name}.w")
        self.gamma = Param(np.ones((1, c_out, 1, 1)), f"{name}.gamma")
        self.beta = Param(np.zeros((1, c_out, 1, 1)), f"{name}.beta")

    def __call__(self, x):
        y = conv3x3(x, self.w, stride=self.stride)
        return relu(group_norm(y, self.groups, self.gamma, self.beta))

    def params(self):
        return [self.w, self.gamma, self.beta]


class _Backbone:
    def __init__(self, cfg, rng, prefix):
        w = cfg.level_widths
        self.stem = _ConvGN(cfg.in_channels, w[0], cfg.gn_groups, rng,
                            f"{prefix}.stem", stride=2)
        self.stages = []
        c_prev = w[0]
        for i, c_out in enumerate(w):
            self.stages.append(_ConvGN(c_prev, c_out, cfg.gn_groups, rng,
                                       f"{prefix}.c{i + 2}", stride=2))
            c_prev = c_out

    def __call__(self, x):
        feats = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return dict(zip(LEVELS, feats))

    def params(self):
        out = self.stem.params()
        for s in self.stages:
            out += s.params()
        return out


class _FPN:
    def __init__(self, cfg, rng, prefix):
        self.lats = {
            lvl: Param(he_init(rng, cfg.fpn_width, cfg.level_widths[i]),
                       f"{prefix}.lat{lvl}.w")
            for i, lvl in enumerate(LEVELS)
        }

    def __call__(self, feats):
        out = {}
        upper = None
        for lvl in reversed(LEVELS):
            lat = pointwise_conv(feats[lvl], self.lats[lvl])
            if upper is not None:
                h, w = lat.shape[2:]
                lat = add_n([lat, bilinear_resize(upper, h, w)])
            out[lvl] = lat
            upper = lat
        return out

    def params(self):
        return list(self.lats.values())


class Model:
    """The assembled network; see module docstring for the data flow."""

    def __init__(self, cfg, categories=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._params = []

        self.backbone = _Backbone(cfg, rng, "backbone")
        self.fpn = _FPN(cfg, rng, "fpn")
        self._params += self.backbone.params() + self.fpn.params()
        if not cfg.e2e:
            self.bg_backbone = _Backbone(cfg, rng, "bg_backbone")
            self.bg_fpn = _FPN(cfg, rng, "bg_fpn")
            self._params += self.bg_backbone.params() + self.bg_fpn.params()
        else:
            self.bg_backbone = None
            self.bg_fpn = None

        # RPN branch (shared across levels)
        self.rpn_conv = _ConvGN(cfg.fpn_width, cfg.rpn_width, cfg.gn_groups,
                                rng, "rpn.conv")
        self.obj_w = Param(he_init(rng, 1, cfg.rpn_width), "rpn.obj.w")
        self.obj_b = Param(np.zeros((1, 1, 1, 1)), "rpn.obj.b")
        self._params += self.rpn_conv.params() + [self.obj_w, self.obj_b]

        # foreground branch: RoI trunk shared across levels
        cw = cfg.fpn_width
        self.roi_conv1 = _ConvGN(cw, cw, cfg.gn_groups, rng, "fg.conv1")
        self.roi_conv2 = _ConvGN(cw, cw, cfg.gn_groups, rng, "fg.conv2")
        self.mask_w = Param(he_init(rng, cfg.mask_channels, cw), "fg.mask.w")
        self.mask_b = Param(np.zeros((1, cfg.mask_channels, 1, 1)), "fg.mask.b")
        self.cls_w = Param(he_init(rng, cfg.num_things, cw), "fg.cls.w")
        self.cls_b = Param(np.zeros((1, cfg.num_things, 1, 1)), "fg.cls.b")
        self._params += (self.roi_conv1.params() + self.roi_conv2.params()
                         + [self.mask_w, self.mask_b, self.cls_w, self.cls_b])

        # background branch
        self.light_heads = {
            lvl: _ConvGN(cw, cfg.semantic_width, cfg.gn_groups, rng,
                         f"bg.light{lvl}")
            for lvl in LEVELS
        }
        for head in self.light_heads.values():
            self._params += head.params()

        self.pam_heads = {}
        if cfg.pam:
            self.pam_heads = {
                lvl: AttentionHead(cfg.rpn_width, cfg.attn_hidden,
                                   cfg.semantic_width, cfg.gn_groups, rng,
                                   name=f"pam.l{lvl}")
                for lvl in LEVELS
            }
            for head in self.pam_heads.values():
                self._params += head.params()

        self.mam_heads = {}
        if cfg.mam:
            self.mam_heads = {
                lvl: AttentionHead(cfg.mask_channels, cfg.attn_hidden,
                                   cfg.semantic_width, cfg.gn_groups, rng,
                                   name=f"mam.l{lvl}")
                for lvl in LEVELS
            }
            for head in self.mam_heads.values():
                self._params += head.params()

        self.sem_w = Param(he_init(rng, cfg.num_semantic, cfg.semantic_width),
                           "bg.sem.w")
        self.sem_b = Param(np.zeros((1, cfg.num_semantic, 1, 1)), "bg.sem.b")
        self._params += [self.sem_w, self.sem_b]

        names = [p.name for p in self._params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in census")

    # -- parameter census ---------------------------------------------------

    def parameters(self):
        return list(self._params)

    def param_names(self):
        return [p.name for p in self._params]

    def num_parameters(self):
        return sum(p.data.size for p in self._params)

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def zero_attention_parameters(self):
        """Cold-start analytics: zero every PAM/MAM parameter in place."""
        for head in list(self.pam_heads.values()) + list(self.mam_heads.values()):
            head.zero_()

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        arrays = {p.name: p.data for p in self._params}
        cfg = asdict(self.cfg)
        cfg["level_widths"] = list(cfg["level_widths"])
        np.savez(path, __config__=json.dumps(cfg), **arrays)

    @classmethod
    def load(cls, path):
        blob = np.load(path, allow_pickle=False)
        cfg_dict = json.loads(str(blob["__config__"]))
        cfg = ModelConfig(**cfg_dict)
        model = cls(cfg)
        for p in model.parameters():
            p.data[...] = blob[p.name]
        return model

    # -- forward --------------------------------------------------------------

    def forward(self, image, rois):
        """Run one scene through the network.

        ``image`` is (1, 3, H, W) (Tensor or array), ``rois`` a list of RoI
        in image coordinates. Levels are assigned here when missing.
        """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.shape[0] != 1:
            raise ValueError(f"forward handles one scene at a time, got N={image.shape[0]}")
        cfg = self.cfg

        pyramid = self.fpn(self.backbone(image))
        bg_pyramid = (self.bg_fpn(self.bg_backbone(image))
                      if self.bg_backbone is not None else pyramid)

        # RPN branch
        rpn_feats = {lvl: self.rpn_conv(pyramid[lvl]) for lvl in LEVELS}
        objectness = {
            lvl: pointwise_conv(rpn_feats[lvl], self.obj_w, self.obj_b)
            for lvl in LEVELS
        }

        # foreground branch
        assign_levels([r for r in rois if r.level is None])
        mask_logits, class_logits = [], []
        for r in rois:
            scale = 1.0 / STRIDES[r.level]
            crop = roi_ops.roi_align(pyramid[r.level], r, cfg.mask_size, scale)
            trunk = self.roi_conv2(self.roi_conv1(crop))
            mask_logits.append(pointwise_conv(trunk, self.mask_w, self.mask_b))
            class_logits.append(
                pointwise_conv(global_avg_pool(trunk), self.cls_w, self.cls_b))

        # background branch
        pam_maps, mam_maps = {}, {}
        sem_levels = []
        target_hw = None
        for lvl in LEVELS:
            s_i = self.light_heads[lvl](bg_pyramid[lvl])
            if cfg.pam:
                res = attention.pam(rpn_feats[lvl], s_i, self.pam_heads[lvl],
                                    reweight=cfg.reweight)
                pam_maps[lvl] = res.bg_weight.data[0, 0].copy()
                s_i = res.output
            if cfg.mam:
                canvas = self._mask_canvas(lvl, rois, mask_logits,
                                           s_i.shape[2:])
                res = attention.mam(s_i, canvas, self.mam_heads[lvl],
                                    reweight=cfg.reweight)
                mam_maps[lvl] = res.bg_weight.data[0, 0].copy()
                s_i = res.output
            if target_hw is None:
                target_hw = s_i.shape[2:]
            sem_levels.append(bilinear_resize(s_i, *target_hw)
                              if s_i.shape[2:] != target_hw else s_i)
        fused = add_n(sem_levels)
        semantic = pointwise_conv(fused, self.sem_w, self.sem_b)

        return ModelOutputs(objectness=objectness, rpn_features=rpn_feats,
                            mask_logits=mask_logits, class_logits=class_logits,
                            semantic_logits=semantic, rois=rois,
                            pam_maps=pam_maps, mam_maps=mam_maps)

    def _mask_canvas(self, lvl, rois, mask_logits, hw):
        cfg = self.cfg
        patches, values = [], []
        for r, logits in zip(rois, mask_logits):
            if r.level != lvl:
                continue
            patches.append(MaskPatch(r, logits))
            values.append(sigmoid(logits) if cfg.scatter_probs else logits)
        return roi_ops.roi_upsample(
            patches, (cfg.mask_channels, hw[0], hw[1]),
            1.0 / STRIDES[lvl], values=values)
