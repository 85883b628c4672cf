"""Finite-difference verification suites for every differentiable operator.

``operator_suite`` covers each primitive plus the two attention chains;
``full_model_check`` differentiates the whole network's joint loss on a tiny
scene and verifies every parameter. Both are wired into the ``gradcheck``
CLI subcommand and the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import attention
from .model import Model, ModelConfig
from .roi import MaskPatch, RoI, roi_align, roi_upsample
from .tensor import (
    Param,
    Tensor,
    add,
    bce_with_logits,
    bilinear_resize,
    conv3x3,
    global_avg_pool,
    grad_check,
    group_norm,
    mul,
    pointwise_conv,
    relu,
    sigmoid,
    softmax_cross_entropy,
)
from .train import LossWeights, build_targets, joint_loss


@dataclass
class SuiteEntry:
    name: str
    max_rel_error: float
    tolerance: float
    ok: bool
    seconds: float


def _run(name, fn, wrt, names, tolerance, rng, entries, **kwargs):
    t0 = time.time()
    rep = grad_check(fn, wrt, names=names, tolerance=tolerance, rng=rng, **kwargs)
    entries.append(SuiteEntry(name=name, max_rel_error=rep.max_rel_error(),
                              tolerance=tolerance, ok=rep.ok,
                              seconds=time.time() - t0))
    return rep


def operator_suite(tolerance=1e-5, seed=0):
    """Gradient-check every operator and the attention chains."""
    rng = np.random.default_rng(seed)
    entries = []

    x = Tensor(rng.standard_normal((2, 3, 5, 6)), requires_grad=True)
    w = Param(rng.standard_normal((4, 3, 1, 1)), "w")
    b = Param(rng.standard_normal((1, 4, 1, 1)), "b")
    _run("pointwise_conv", lambda: pointwise_conv(x, w, b), [x, w, b],
         ["x", "w", "bias"], tolerance, rng, entries)

    x1 = Tensor(rng.standard_normal((1, 3, 6, 7)), requires_grad=True)
    k1 = Param(rng.standard_normal((2, 3, 3, 3)), "k1")
    _run("conv3x3/s1", lambda: conv3x3(x1, k1, stride=1), [x1, k1],
         ["x", "w"], tolerance, rng, entries)
    _run("conv3x3/s2", lambda: conv3x3(x1, k1, stride=2), [x1, k1],
         ["x", "w"], tolerance, rng, entries)

    xg = Tensor(rng.standard_normal((2, 6, 4, 4)), requires_grad=True)
    gam = Param(rng.standard_normal((1, 6, 1, 1)), "gamma")
    bet = Param(rng.standard_normal((1, 6, 1, 1)), "beta")
    _run("group_norm", lambda: group_norm(xg, 3, gam, bet), [xg, gam, bet],
         ["x", "gamma", "beta"], tolerance, rng, entries)

    xp = Tensor(rng.standard_normal((2, 4, 5, 3)), requires_grad=True)
    _run("global_avg_pool", lambda: global_avg_pool(xp), [xp], ["x"],
         tolerance, rng, entries)

    xa = Tensor(rng.standard_normal((1, 3, 4, 4)) + 0.05, requires_grad=True)
    _run("relu", lambda: relu(xa), [xa], ["x"], tolerance, rng, entries)
    _run("sigmoid", lambda: sigmoid(xa), [xa], ["x"], tolerance, rng, entries)

    ea = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
    eb = Tensor(rng.standard_normal((2, 1, 4, 5)), requires_grad=True)
    ec = Tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
    _run("elementwise/mul-spatial", lambda: mul(ea, eb), [ea, eb],
         ["a", "b"], tolerance, rng, entries)
    _run("elementwise/add-channel", lambda: add(ea, ec), [ea, ec],
         ["a", "b"], tolerance, rng, entries)

    xr = Tensor(rng.standard_normal((1, 2, 5, 4)), requires_grad=True)
    _run("bilinear_resize", lambda: bilinear_resize(xr, 8, 9), [xr], ["x"],
         tolerance, rng, entries)

    feats = Tensor(rng.standard_normal((1, 3, 12, 12)), requires_grad=True)
    roi = RoI(0, (1.3, 2.1, 9.6, 10.2))
    _run("roi_align", lambda: roi_align(feats, roi, 5, 1.0), [feats],
         ["features"], tolerance, rng, entries)

    pvals = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    _run("roi_upsample",
         lambda: roi_upsample([MaskPatch(roi, pvals)], (1, 12, 12), 1.0),
         [pvals], ["mask"], tolerance, rng, entries)

    # losses
    xl = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    tl = rng.random((1, 1, 4, 4))
    _run("bce_with_logits", lambda: bce_with_logits(xl, tl), [xl], ["logits"],
         tolerance, rng, entries)
    xs = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    lab = rng.integers(0, 4, (1, 3, 3))
    _run("softmax_cross_entropy", lambda: softmax_cross_entropy(xs, lab),
         [xs], ["logits"], tolerance, rng, entries)

    # proposal attention chain: conv-relu-conv map, residual emphasis, reweight
    head = attention.AttentionHead(3, 5, 4, 2, rng=np.random.default_rng(11),
                                   name="chk.pam")
    p_i = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    s_i = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    _run("pam_chain",
         lambda: attention.pam(p_i, s_i, head).output,
         [p_i, s_i] + head.params(),
         ["p", "s", "w1", "w2", "w3", "gamma", "beta"],
         tolerance, rng, entries)

    # mask attention chain, gradients flowing through roi_upsample
    mhead = attention.AttentionHead(1, 5, 4, 2, rng=np.random.default_rng(12),
                                    name="chk.mam")
    mvals = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    s_m = Tensor(rng.standard_normal((1, 4, 10, 10)), requires_grad=True)
    mroi = RoI(0, (0.7, 1.0, 8.4, 8.9))

    def mam_chain():
        canvas = roi_upsample([MaskPatch(mroi, sigmoid(mvals))], (1, 10, 10),
                              1.0)
        return attention.mam(s_m, canvas, mhead).output

    _run("mam_chain", mam_chain, [mvals, s_m] + mhead.params(),
         ["mask_logits", "s", "w1", "w2", "w3", "gamma", "beta"],
         tolerance, rng, entries)

    return entries


def tiny_model_config(seed=0):
    """Small widths for the whole-network finite-difference check.

    gn_groups stays at 2 so even the 1x1 top level keeps >= 2 elements per
    normalization group; a single-element group has zero variance, which
    parks the following relu exactly on its kink where finite differences
    are undefined.
    """
    return ModelConfig(image_size=8, level_widths=(4, 4, 8, 8), fpn_width=8,
                       rpn_width=8, attn_hidden=8, semantic_width=8,
                       gn_groups=2, num_things=2, num_stuff=2, seed=seed)


def full_model_check(tolerance=1e-4, seed=0, max_coords=4):
    """Differentiate the joint loss on an 8x8 scene w.r.t. every parameter."""
    from .panoptic import Categories, CategoryMeta
    from .roi import RoI

    rng = np.random.default_rng(seed)
    cfg = tiny_model_config(seed)
    model = Model(cfg)
    cats = Categories([
        CategoryMeta(1, "bg-a", False), CategoryMeta(2, "bg-b", False),
        CategoryMeta(3, "fg-a", True), CategoryMeta(4, "fg-b", True),
    ])

    image = rng.random((1, 3, 8, 8))
    pcat = np.ones((8, 8), np.int32)
    pcat[5:, :] = 2
    pcat[1:5, 1:5] = 3
    pcat[4:7, 5:8] = 4
    pinst = np.zeros((8, 8), np.int32)
    pinst[1:5, 1:5] = 1
    pinst[4:7, 5:8] = 2

    from .panoptic import PanopticMap
    from .panoptic_io import Scene, SceneInstance
    scene = Scene(image=image[0],
                  pmap=PanopticMap(pcat, pinst),
                  instances=[SceneInstance(1, 3, (1.0, 1.0, 5.0, 5.0)),
                             SceneInstance(2, 4, (5.0, 4.0, 8.0, 7.0))])
    targets = build_targets(scene, cats, cfg)
    weights = LossWeights.profile("coco")

    def loss():
        outputs = model.forward(image, [RoI(0, si.box, class_id=si.class_id)
                                        for si in scene.instances])
        return joint_loss(outputs, targets, weights)[0]

    t0 = time.time()
    rep = grad_check(loss, model.parameters(), names=model.param_names(),
                     tolerance=tolerance, rng=rng, max_coords=max_coords)
    entry = SuiteEntry(name="full_model", max_rel_error=rep.max_rel_error(),
                       tolerance=tolerance, ok=rep.ok,
                       seconds=time.time() - t0)
    return entry, rep


def render_suite(entries):
    width = max(len(e.name) for e in entries)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  {'tol':>8}  "
             f"{'time':>7}  status"]
    for e in entries:
        lines.append(f"{e.name:<{width}}  {e.max_rel_error:>12.3e}  "
                     f"{e.tolerance:>8.0e}  {e.seconds:>6.2f}s  "
                     f"{'ok' if e.ok else 'FAIL'}")
    return "\n".join(lines)
