import numpy as np
import pytest

from conftest import check_gradients, make_sample
from unicorn_mil import autodiff as ad
from unicorn_mil.data import FeatureBag, SampleRecord
from unicorn_mil.errors import ConfigError, ShapeError
from unicorn_mil.model import ModelConfig, UnicornModel, cls_to_mt_attention, predict
from unicorn_mil.rng import Rng


class TestConfig:
    def test_defaults_match_contract(self):
        cfg = ModelConfig()
        assert (cfg.n_modalities, cfg.n_classes, cfg.feat_dim, cfg.model_dim) == (4, 5, 768, 256)
        assert (cfg.n_heads, cfg.blocks_per_expert, cfg.blocks_aggregator) == (4, 2, 2)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(model_dim=30, n_heads=4).validate()


class TestForward:
    def test_single_modality_shapes(self, tiny_model):
        sample = make_sample(Rng(1))
        trace = tiny_model.forward(sample, [0], None, training=False)
        # aggregator sees exactly CLS + one modality token
        assert trace.aggregator_attention[0].n_tokens == 2
        assert trace.logits.data.shape == (1, 5)
        assert trace.penultimate.shape == (16,)
        assert abs(trace.probabilities.sum() - 1.0) < 1e-9

    def test_masking_equals_absence_bit_exact(self, tiny_model):
        sample = make_sample(Rng(2))
        masked = tiny_model.forward(sample, [0, 2], None, training=False)
        deleted = SampleRecord(
            sample.sample_id, sample.individual_id, sample.segment_id, sample.label,
            {m: sample.bags[m] for m in (0, 2)},
        )
        full = tiny_model.forward(deleted, [0, 2], None, training=False)
        assert np.array_equal(masked.logits.data, full.logits.data)
        assert np.array_equal(masked.penultimate, full.penultimate)

    def test_patch_permutation_invariance(self, tiny_model):
        rng = Rng(3)
        sample = make_sample(rng, n_patches=(5, 6, 4, 7))
        base = tiny_model.forward(sample, [0, 1, 2, 3], None, training=False)
        shuffled_bags = {
            m: FeatureBag(m, b.slide_id, b.matrix[rng.permutation(b.n_patches)])
            for m, b in sample.bags.items()
        }
        shuffled = SampleRecord("s0", "ind0", "seg0", 1, shuffled_bags)
        out = tiny_model.forward(shuffled, [0, 1, 2, 3], None, training=False)
        assert np.abs(out.logits.data - base.logits.data).max() < 1e-9

    def test_empty_mask_rejected(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.forward(make_sample(Rng(4)), [], None, training=False)

    def test_mask_of_absent_modality_rejected(self, tiny_model):
        sample = make_sample(Rng(5), modalities=(0, 1))
        with pytest.raises(ShapeError):
            tiny_model.forward(sample, [0, 3], None, training=False)

    def test_wrong_feature_width_rejected(self, tiny_model):
        sample = make_sample(Rng(6), feat_dim=9)
        with pytest.raises(ShapeError):
            tiny_model.forward(sample, [0], None, training=False)

    def test_empty_bag_rejected(self, tiny_model):
        bags = {0: FeatureBag(0, "s", np.zeros((0, 8)))}
        sample = SampleRecord("s", "i", "g", 0, bags)
        with pytest.raises(ShapeError):
            tiny_model.forward(sample, [0], None, training=False)

    def test_forward_is_deterministic_at_inference(self, tiny_model):
        sample = make_sample(Rng(7))
        a = tiny_model.forward(sample, [0, 1, 2, 3], None, training=False)
        b = tiny_model.forward(sample, [0, 1, 2, 3], None, training=False)
        assert np.array_equal(a.logits.data, b.logits.data)


class TestPredict:
    def test_tie_breaks_to_lower_class(self, tiny_model):
        # equal logits arise with a zeroed head
        tiny_model.head_w.data = np.zeros_like(tiny_model.head_w.data)
        tiny_model.head_b.data = np.zeros_like(tiny_model.head_b.data)
        cls, probs = predict(tiny_model, make_sample(Rng(8)), [0, 1])
        assert cls == 0
        assert np.allclose(probs, 0.2, atol=1e-12)

    def test_probabilities_sum_to_one(self, tiny_model):
        _, probs = predict(tiny_model, make_sample(Rng(9)), [1, 3])
        assert abs(probs.sum() - 1.0) < 1e-9


class TestClsToMtAttention:
    def test_single_modality_is_total_non_self_mass(self, tiny_model):
        sample = make_sample(Rng(10))
        trace = tiny_model.forward(sample, [2], None, training=False)
        att = cls_to_mt_attention(trace, [2], n_modalities=4)
        per_layer = [rec.heads.mean(axis=0)[0] for rec in trace.aggregator_attention]
        non_self = np.mean([1.0 - row[0] for row in per_layer])
        assert att[2] is not None and abs(att[2] - non_self) < 1e-12
        assert att[0] is None and att[1] is None and att[3] is None

    def test_values_in_unit_interval(self, tiny_model):
        sample = make_sample(Rng(11))
        trace = tiny_model.forward(sample, [0, 1, 2, 3], None, training=False)
        att = cls_to_mt_attention(trace, [0, 1, 2, 3], n_modalities=4)
        for v in att.values():
            assert v is not None and 0.0 <= v <= 1.0


class TestInitScale:
    def test_initial_logits_near_uniform(self):
        cfg = ModelConfig(feat_dim=16, model_dim=32)
        model = UnicornModel(cfg, Rng(12))
        sample = make_sample(Rng(13), feat_dim=16)
        trace = model.forward(sample, [0, 1, 2, 3], None, training=False)
        loss = ad.cross_entropy(trace.logits, 0)
        assert abs(loss.item() - np.log(5.0)) < 0.1

    def test_init_deterministic(self):
        cfg = ModelConfig(feat_dim=8, model_dim=16)
        a = UnicornModel(cfg, Rng(1))
        b = UnicornModel(cfg, Rng(1))
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)


class TestEndToEndGradients:
    def test_gradcheck_two_patches(self):
        cfg = ModelConfig(feat_dim=4, model_dim=8, n_heads=2,
                          blocks_per_expert=1, blocks_aggregator=1)
        model = UnicornModel(cfg, Rng(14))
        sample = make_sample(Rng(15), feat_dim=4, n_patches=(2, 2, 2, 2))
        subset = {
            name: model.params[name]
            for name in ["proj.1.w", "mt.0", "cls", "head.w",
                         "expert.0.0.wq", "expert.2.0.mlp_w2", "agg.0.wv",
                         "agg.0.ln1_gain", "head.b"]
        }

        def loss():
            trace = model.forward(sample, [0, 1, 2, 3], None, training=False)
            return ad.cross_entropy(trace.logits, sample.label)

        check_gradients(loss, list(subset.values()), tol=1e-4)
