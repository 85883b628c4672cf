"""Attention blocks: residual background emphasis and channel reweighting."""

import numpy as np
import pytest

from panolab.attention import (
    AttentionHead,
    apply_background_attention,
    attend,
    background_reweight,
    foreground_map,
    mam,
    pam,
)
from panolab.roi import MaskPatch, RoI, roi_upsample
from panolab.tensor import Param, Tensor, grad_check, sigmoid


def make_head(c_in=3, hidden=4, c_s=4, groups=2, seed=0, name="h"):
    return AttentionHead(c_in, hidden, c_s, groups,
                         rng=np.random.default_rng(seed), name=name)


class TestForegroundMap:
    def test_zero_weights_give_zero_map(self):
        head = make_head()
        head.zero_()
        p = Tensor(np.random.default_rng(0).standard_normal((1, 3, 5, 5)))
        m = foreground_map(p, head)
        assert m.shape == (1, 1, 5, 5)
        np.testing.assert_array_equal(m.data, 0.0)

    def test_identity_then_sum_is_channel_sum(self):
        # first conv the identity, second conv all-ones: nonnegative inputs
        # pass relu untouched and the map is the channel sum
        head = make_head(c_in=3, hidden=3)
        head.w1.data[...] = np.eye(3).reshape(3, 3, 1, 1)
        head.w2.data[...] = 1.0
        p = Tensor(np.abs(np.random.default_rng(1).standard_normal((1, 3, 1, 1))))
        m = foreground_map(p, head)
        assert m.data[0, 0, 0, 0] == pytest.approx(p.data.sum(), rel=1e-12)

    def test_channel_mismatch(self):
        head = make_head(c_in=3)
        with pytest.raises(ValueError, match="channels"):
            foreground_map(Tensor(np.zeros((1, 2, 4, 4))), head)


class TestBackgroundAttention:
    def _s(self, seed=0):
        return Tensor(np.random.default_rng(seed).standard_normal((1, 4, 3, 3)))

    def test_strong_foreground_passes_residual_only(self):
        s = self._s()
        m = Tensor(np.full((1, 1, 3, 3), 60.0))  # sigmoid saturates to 1
        out, bg = apply_background_attention(s, m)
        np.testing.assert_allclose(out.data, s.data, atol=1e-12)
        assert np.all(bg.data >= 0) and np.all(bg.data < 1e-12)

    def test_pure_background_doubles(self):
        s = self._s(1)
        m = Tensor(np.full((1, 1, 3, 3), -60.0))  # sigmoid -> 0
        out, _ = apply_background_attention(s, m)
        np.testing.assert_allclose(out.data, 2.0 * s.data, atol=1e-12)

    def test_zero_map_gives_three_halves(self):
        s = self._s(2)
        m = Tensor(np.zeros((1, 1, 3, 3)))
        out, bg = apply_background_attention(s, m)
        np.testing.assert_allclose(out.data, 1.5 * s.data, rtol=1e-15)
        np.testing.assert_array_equal(bg.data, 0.5)

    def test_amplification_bounds_and_monotonicity(self):
        s = Tensor(np.ones((1, 1, 1, 5)))
        ms = np.linspace(-8, 8, 5).reshape(1, 1, 1, 5)
        out, _ = apply_background_attention(s, Tensor(ms))
        factors = out.data.reshape(-1)
        assert np.all(factors > 1.0) and np.all(factors < 2.0)
        assert np.all(np.diff(factors) < 0)  # decreasing in the map

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="broadcast"):
            apply_background_attention(self._s(), Tensor(np.zeros((1, 1, 2, 2))))


class TestBackgroundReweight:
    def test_identical_channels_gate_at_half(self):
        head = make_head(c_s=4, groups=2)
        # constant gate weights map the equal pooled channels to equal
        # activations; zero grouped variance collapses GN to beta = 0 and the
        # sigmoid gates every channel at exactly 0.5
        head.w3.data[...] = 0.3
        s = Tensor(np.full((1, 4, 3, 3), 2.0))
        out, gate = background_reweight(s, head)
        np.testing.assert_allclose(gate.data, 0.5, atol=1e-12)
        np.testing.assert_allclose(out.data, 0.5 * s.data, atol=1e-12)

    def test_gate_bounds_and_damping(self):
        rng = np.random.default_rng(3)
        head = make_head(c_s=4, groups=2, seed=5)
        s = Tensor(rng.standard_normal((2, 4, 4, 4)))
        out, gate = background_reweight(s, head)
        assert np.all(gate.data > 0) and np.all(gate.data < 1)
        assert np.all(np.abs(out.data) <= np.abs(s.data) + 1e-15)


class TestPamComposition:
    def test_zero_parameters_give_exact_three_quarters(self):
        head = make_head()
        head.zero_()
        rng = np.random.default_rng(4)
        p = Tensor(rng.standard_normal((1, 3, 4, 4)))
        s = Tensor(rng.standard_normal((1, 4, 4, 4)))
        res = pam(p, s, head)
        assert np.array_equal(res.output.data, 0.75 * s.data)

    def test_matches_manual_chain_bitwise(self):
        head = make_head(seed=7)
        rng = np.random.default_rng(5)
        p = Tensor(rng.standard_normal((1, 3, 4, 4)))
        s = Tensor(rng.standard_normal((1, 4, 4, 4)))
        res = pam(p, s, head)
        m = foreground_map(p, head)
        s_prime, _ = apply_background_attention(s, m)
        s_second, _ = background_reweight(s_prime, head)
        assert np.array_equal(res.output.data, s_second.data)

    def test_per_level_independence(self):
        rng = np.random.default_rng(6)
        heads = [make_head(seed=i, name=f"l{i}") for i in range(3)]
        ps = [Tensor(rng.standard_normal((1, 3, 4, 4))) for _ in range(3)]
        ss = [Tensor(rng.standard_normal((1, 4, 4, 4))) for _ in range(3)]
        forward = [pam(p, s, h).output.data for p, s, h in zip(ps, ss, heads)]
        reverse = [pam(p, s, h).output.data
                   for p, s, h in zip(ps[::-1], ss[::-1], heads[::-1])][::-1]
        for a, b in zip(forward, reverse):
            assert np.array_equal(a, b)

    def test_shapes_preserved_and_maps_bounded(self):
        head = make_head(seed=8)
        rng = np.random.default_rng(7)
        p = Tensor(rng.standard_normal((1, 3, 6, 5)))
        s = Tensor(rng.standard_normal((1, 4, 6, 5)))
        res = pam(p, s, head)
        assert res.output.shape == s.shape
        assert np.all(res.bg_weight.data > 0) and np.all(res.bg_weight.data < 1)
        assert np.all(res.channel_gate.data > 0)
        assert np.all(res.channel_gate.data < 1)

    def test_reweight_flag_skips_gate(self):
        head = make_head(seed=9)
        rng = np.random.default_rng(8)
        p = Tensor(rng.standard_normal((1, 3, 4, 4)))
        s = Tensor(rng.standard_normal((1, 4, 4, 4)))
        res = pam(p, s, head, reweight=False)
        assert res.channel_gate is None
        assert np.array_equal(res.output.data, res.attended.data)

    def test_end_to_end_gradient(self):
        head = make_head(seed=10)
        rng = np.random.default_rng(9)
        p = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        s = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        rep = grad_check(lambda: pam(p, s, head).output,
                         [p, s] + head.params(), tolerance=1e-4)
        assert rep.ok, str(rep)


class TestMam:
    def test_empty_canvas_zero_params_three_quarters(self):
        head = make_head(c_in=1, seed=11)
        head.zero_()
        rng = np.random.default_rng(10)
        s = Tensor(rng.standard_normal((1, 4, 8, 8)))
        canvas = roi_upsample([], (1, 8, 8), 1.0)
        res = mam(s, canvas, head)
        assert np.array_equal(res.output.data, 0.75 * s.data)

    def test_saturated_region_limit(self):
        # head wired as relu(c) - relu(-c) = c, so the map equals the canvas:
        # saturated-positive region passes s through, saturated-negative
        # region doubles, pre-reweight
        head = make_head(c_in=1, hidden=2, seed=12)
        head.w1.data[...] = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
        head.w2.data[...] = np.array([1.0, -1.0]).reshape(1, 2, 1, 1)
        canvas = np.full((1, 1, 4, 4), -50.0)
        canvas[0, 0, :2, :] = 50.0
        rng = np.random.default_rng(11)
        s = Tensor(rng.standard_normal((1, 4, 4, 4)))
        res = mam(s, Tensor(canvas), head, reweight=False)
        np.testing.assert_allclose(res.output.data[:, :, :2], s.data[:, :, :2],
                                   atol=1e-12)
        np.testing.assert_allclose(res.output.data[:, :, 2:],
                                   2 * s.data[:, :, 2:], atol=1e-12)

    def test_gradient_reaches_mask_logits_through_scatter(self):
        head = make_head(c_in=1, seed=13)
        rng = np.random.default_rng(12)
        logits = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        s = Tensor(rng.standard_normal((1, 4, 10, 10)), requires_grad=True)
        roi = RoI(0, (0.8, 1.2, 8.6, 9.1))

        def chain():
            canvas = roi_upsample([MaskPatch(roi, sigmoid(logits))],
                                  (1, 10, 10), 1.0)
            return mam(s, canvas, head).output

        rep = grad_check(chain, [logits, s] + head.params(), tolerance=1e-4)
        assert rep.ok, str(rep)
        # the mask logits really receive signal, not just a zero gradient
        assert np.abs(logits.grad).max() > 1e-6


class TestAttendGeneric:
    def test_attend_equals_pam_wrapper(self):
        head = make_head(seed=14)
        rng = np.random.default_rng(13)
        p = Tensor(rng.standard_normal((1, 3, 4, 4)))
        s = Tensor(rng.standard_normal((1, 4, 4, 4)))
        a = attend(p, s, head).output.data
        b = pam(p, s, head).output.data
        assert np.array_equal(a, b)

    def test_group_divisibility_checked_at_head_construction(self):
        with pytest.raises(ValueError, match="divisible"):
            AttentionHead(3, 4, 5, 2, rng=np.random.default_rng(0))
