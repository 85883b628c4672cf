"""Network wiring: shapes, flag semantics, parameter census, persistence."""

import numpy as np
import pytest

from panolab.model import LEVELS, Model, ModelConfig, level_sizes
from panolab.panoptic_io import SceneSpec, default_categories, generate_scene, instance_rois
from panolab.tensor import Tensor, add_n, affine, bilinear_resize, pointwise_conv


def small_cfg(**kwargs):
    base = dict(image_size=32, level_widths=(4, 4, 8, 8), fpn_width=8,
                rpn_width=8, attn_hidden=8, semantic_width=8, gn_groups=2,
                num_things=3, num_stuff=3, seed=0)
    base.update(kwargs)
    return ModelConfig(**base)


def scene32(seed=0):
    return generate_scene(SceneSpec(seed=seed, size=32, max_things=2))


class TestLevelSizes:
    def test_default_image(self):
        sizes = level_sizes(64, 64)
        assert sizes == {2: (16, 16), 3: (8, 8), 4: (4, 4), 5: (2, 2)}

    def test_tiny_image_never_hits_zero(self):
        sizes = level_sizes(8, 8)
        assert min(min(v) for v in sizes.values()) >= 1


class TestForward:
    def test_output_shapes(self):
        cfg = small_cfg()
        model = Model(cfg)
        scene = scene32()
        out = model.forward(scene.image[None], instance_rois(scene))
        sizes = level_sizes(32, 32)
        for lvl in LEVELS:
            assert out.objectness[lvl].shape == (1, 1, *sizes[lvl])
            assert out.rpn_features[lvl].shape == (1, cfg.rpn_width,
                                                   *sizes[lvl])
        assert out.semantic_logits.shape == (1, 6, *sizes[2])
        assert len(out.mask_logits) == len(scene.instances)
        for ml, cl in zip(out.mask_logits, out.class_logits):
            assert ml.shape == (1, 1, 14, 14)
            assert cl.shape == (1, 3, 1, 1)

    def test_zeroed_parameters_give_uniform_semantic_softmax(self):
        model = Model(small_cfg())
        for p in model.parameters():
            p.data[...] = 0.0
        scene = scene32()
        out = model.forward(scene.image[None], instance_rois(scene))
        logits = out.semantic_logits.data
        assert np.allclose(logits, logits[0, :1])  # equal across classes

    def test_attention_maps_exported_when_enabled(self):
        model = Model(small_cfg(pam=True, mam=True))
        scene = scene32()
        out = model.forward(scene.image[None], instance_rois(scene))
        assert set(out.pam_maps) == set(LEVELS)
        assert set(out.mam_maps) == set(LEVELS)
        for lvl in LEVELS:
            assert np.all(out.pam_maps[lvl] > 0)
            assert np.all(out.pam_maps[lvl] < 1)

    def test_batch_dim_enforced(self):
        model = Model(small_cfg())
        with pytest.raises(ValueError, match="one scene"):
            model.forward(np.zeros((2, 3, 32, 32)), [])


class TestFlagSemantics:
    def test_disabled_attention_matches_hand_wired_plain_path(self):
        cfg = small_cfg(pam=False, mam=False)
        model = Model(cfg)
        scene = scene32()
        out = model.forward(scene.image[None], instance_rois(scene))

        # recompute the background branch directly from the same parameters
        pyramid = model.fpn(model.backbone(Tensor(scene.image[None])))
        target_hw = None
        levels = []
        for lvl in LEVELS:
            s_i = model.light_heads[lvl](pyramid[lvl])
            if target_hw is None:
                target_hw = s_i.shape[2:]
            levels.append(s_i if s_i.shape[2:] == target_hw
                          else bilinear_resize(s_i, *target_hw))
        expect = pointwise_conv(add_n(levels), model.sem_w, model.sem_b)
        assert np.array_equal(out.semantic_logits.data, expect.data)

    def test_census_toggles_exactly_the_module_parameters(self):
        full = set(Model(small_cfg()).param_names())
        no_mam = set(Model(small_cfg(mam=False)).param_names())
        no_pam = set(Model(small_cfg(pam=False)).param_names())
        assert full - no_mam == {n for n in full if n.startswith("mam.")}
        assert full - no_pam == {n for n in full if n.startswith("pam.")}
        assert all(not n.startswith("mam.") for n in no_mam)

    def test_separate_backbones_double_the_backbone_census(self):
        e2e = Model(small_cfg(pam=False, mam=False, e2e=True))
        sep = Model(small_cfg(pam=False, mam=False, e2e=False))
        extra = set(sep.param_names()) - set(e2e.param_names())
        assert extra and all(n.startswith(("bg_backbone.", "bg_fpn."))
                             for n in extra)
        assert sep.num_parameters() > e2e.num_parameters()

    def test_attention_requires_shared_backbone(self):
        with pytest.raises(ValueError, match="shared backbone"):
            small_cfg(e2e=False, pam=True)

    def test_mask_size_restricted(self):
        with pytest.raises(ValueError, match="mask_size"):
            small_cfg(mask_size=17)


class TestColdStart:
    def test_zeroed_attention_gives_exact_three_quarter_scaling(self):
        cfg = small_cfg()
        plain = Model(small_cfg(pam=False, mam=False))
        attn = Model(cfg)
        # align the shared parameters, then zero the attention heads
        plain_params = {p.name: p for p in plain.parameters()}
        for p in attn.parameters():
            if p.name in plain_params:
                p.data[...] = plain_params[p.name].data
        attn.zero_attention_parameters()
        scene = scene32()
        rois = instance_rois(scene)
        out_plain = plain.forward(scene.image[None], rois)
        out_attn = attn.forward(scene.image[None], rois)
        # each attention block scales its level by exactly 0.5625 = 0.75^2
        # (PAM then MAM); verify through the final linear head
        pyramid = plain.fpn(plain.backbone(Tensor(scene.image[None])))
        levels = []
        target_hw = None
        for lvl in LEVELS:
            s_i = plain.light_heads[lvl](pyramid[lvl])
            s_i = affine(s_i, 0.75 * 0.75)
            if target_hw is None:
                target_hw = s_i.shape[2:]
            levels.append(s_i if s_i.shape[2:] == target_hw
                          else bilinear_resize(s_i, *target_hw))
        expect = pointwise_conv(add_n(levels), plain.sem_w, plain.sem_b)
        np.testing.assert_allclose(out_attn.semantic_logits.data, expect.data,
                                   rtol=0, atol=1e-12)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        model = Model(small_cfg(seed=3))
        scene = scene32(1)
        out = model.forward(scene.image[None], instance_rois(scene))
        path = tmp_path / "ckpt.npz"
        model.save(path)
        again = Model.load(path)
        assert again.cfg == model.cfg
        out2 = again.forward(scene.image[None], instance_rois(scene))
        np.testing.assert_array_equal(out2.semantic_logits.data,
                                      out.semantic_logits.data)
