"""Background-guiding attention blocks.

Two flavours share one mechanism: a small conv-relu-conv head turns a source
feature map (RPN features for proposal attention, a scattered mask canvas
for mask attention) into a single-channel foreground map M. The background
weight 1 - sigmoid(M) is applied residually, S' = S * (1 - sigmoid(M)) + S,
so strongly-foreground positions pass through unchanged while background
positions are amplified up to 2x. An optional channel gate (global average
pool -> 1x1 conv -> group norm -> sigmoid) then downweights unhelpful
channels.

With all head parameters zeroed both blocks reduce to an exact 0.75 * S
scaling: sigmoid(0) = 0.5 gives the 1.5x residual, and the zero-variance
group-norm path gates every channel at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Param,
    Tensor,
    add,
    affine,
    global_avg_pool,
    group_norm,
    mul,
    pointwise_conv,
    relu,
    sigmoid,
)


def he_init(rng, c_out, c_in, kh=1, kw=1, dtype=np.float64):
    """He fan-in normal initialization for a conv kernel."""
    fan_in = c_in * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((c_out, c_in, kh, kw)) * std).astype(dtype)


class AttentionHead:
    """Per-level parameters for one attention block.

    ``in_channels`` is the source width (RPN feature channels for the
    proposal block, mask-canvas channels for the mask block);
    ``semantic_channels`` the width of the feature map being attended.
    """

    def __init__(self, in_channels, hidden, semantic_channels, gn_groups,
                 rng=None, dtype=np.float64, name="attn"):
        if semantic_channels % gn_groups != 0:
            raise ValueError(
                f"{name}: semantic channels ({semantic_channels}) not divisible "
                f"by gn groups ({gn_groups})"
            )
        if rng is None:
            rng = np.random.default_rng(0)
        cs = semantic_channels
        self.gn_groups = gn_groups
        self.name = name
        self.w1 = Param(he_init(rng, hidden, in_channels, dtype=dtype), f"{name}.w1")
        self.w2 = Param(he_init(rng, 1, hidden, dtype=dtype), f"{name}.w2")
        self.w3 = Param(he_init(rng, cs, cs, dtype=dtype), f"{name}.w3")
        self.gamma = Param(np.ones((1, cs, 1, 1), dtype=dtype), f"{name}.gamma")
        self.beta = Param(np.zeros((1, cs, 1, 1), dtype=dtype), f"{name}.beta")

    def params(self):
        return [self.w1, self.w2, self.w3, self.gamma, self.beta]

    def zero_(self):
        """Zero every parameter (cold-start analytics)."""
        for p in self.params():
            p.data[...] = 0.0


@dataclass
class AttentionResult:
    fg_map: Tensor             # M, pre-sigmoid, (N, 1, H, W)
    bg_weight: Tensor          # 1 - sigmoid(M), in (0, 1)
    attended: Tensor           # S' = S * bg_weight + S
    channel_gate: Tensor | None  # (N, C, 1, 1) in (0, 1), None when reweight off
    output: Tensor             # S'' (== attended when reweight off)


def foreground_map(source, head):
    """conv -> relu -> conv squeeze of the source into a 1-channel map."""
    return pointwise_conv(relu(pointwise_conv(source, head.w1)), head.w2)


def apply_background_attention(s, fg_map):
    """Residual background emphasis: S' = S * (1 - sigmoid(M)) + S."""
    if fg_map.shape[2:] != s.shape[2:] or fg_map.shape[1] != 1:
        raise ValueError(
            f"foreground map {fg_map.shape} does not broadcast over features "
            f"{s.shape}"
        )
    bg = affine(sigmoid(fg_map), -1.0, 1.0)
    return add(mul(s, bg), s), bg


def background_reweight(s, head):
    """Channel gate N = sigmoid(GN(conv(GAP(S')))), applied multiplicatively."""
    pooled = global_avg_pool(s)
    gate = sigmoid(group_norm(pointwise_conv(pooled, head.w3), head.gn_groups,
                              head.gamma, head.beta))
    return mul(s, gate), gate


def attend(source, s, head, reweight=True):
    """Full attention block over one level; see module docstring."""
    m = foreground_map(source, head)
    attended, bg = apply_background_attention(s, m)
    if reweight:
        out, gate = background_reweight(attended, head)
    else:
        out, gate = attended, None
    return AttentionResult(fg_map=m, bg_weight=bg, attended=attended,
                           channel_gate=gate, output=out)


def pam(p_i, s_i, head, reweight=True):
    """Proposal attention: guide semantic features with RPN-branch features."""
    return attend(p_i, s_i, head, reweight=reweight)


def mam(s_i, mask_canvas, head, reweight=True):
    """Mask attention: guide semantic features with the scattered mask canvas."""
    return attend(mask_canvas, s_i, head, reweight=reweight)
