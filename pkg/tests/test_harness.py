import numpy as np
import pytest

from unicorn_mil.data import FeatureBag, SampleRecord, SplitPlan
from unicorn_mil.errors import DataError
from unicorn_mil.harness import (
    ablate,
    export_features,
    run_cv,
    train_baseline,
    write_features,
)
from unicorn_mil.model import ModelConfig, UnicornModel
from unicorn_mil.rng import Rng
from unicorn_mil.training import TrainConfig


def records_for(n_individuals, samples_each=2, feat_dim=6, modalities=(0, 1, 2, 3), seed=0):
    rng = Rng(seed)
    out = []
    for i in range(n_individuals):
        for j in range(samples_each):
            bags = {
                m: FeatureBag(m, f"i{i}s{j}m{m}", rng.normal((3, feat_dim)))
                for m in modalities
            }
            out.append(
                SampleRecord(f"i{i}s{j}", f"ind{i}", f"seg{j}", (i + j) % 5, bags)
            )
    return out


def tiny_cfgs(epochs=1):
    model_cfg = ModelConfig(feat_dim=6, model_dim=8, n_heads=2,
                            blocks_per_expert=1, blocks_aggregator=1)
    train_cfg = TrainConfig(epochs=epochs, lr=1e-3, accum_steps=2, seed=5)
    return model_cfg, train_cfg


class TestRunCv:
    def test_structure_and_coverage(self):
        records = records_for(10)
        model_cfg, train_cfg = tiny_cfgs()
        result = run_cv(records, model_cfg, train_cfg)
        assert len(result.folds) == 5
        tested = [sid for f in result.folds for sid in f.test_ids]
        assert sorted(tested) == sorted(r.sample_id for r in records)
        assert 0.0 <= result.mean_accuracy <= 1.0

    def test_rerun_identical_summary(self):
        records = records_for(10)
        model_cfg, train_cfg = tiny_cfgs()
        a = run_cv(records, model_cfg, train_cfg)
        b = run_cv(records, model_cfg, train_cfg)
        assert a.mean_accuracy == b.mean_accuracy
        assert a.mean_macro_f1 == b.mean_macro_f1
        assert [f.predictions for f in a.folds] == [f.predictions for f in b.folds]


class TestRunCvErrors:
    def test_failing_fold_aborts_with_fold_id(self):
        records = records_for(10)
        model_cfg, train_cfg = tiny_cfgs()
        splits = [SplitPlan(fold_id=3, train=["i0s0", "missing-id"], val=["i1s0"], test=["i2s0"])]
        with pytest.raises(DataError, match="fold 3"):
            run_cv(records, model_cfg, train_cfg, splits=splits)


class TestAblate:
    def make_model(self):
        model_cfg, _ = tiny_cfgs()
        return UnicornModel(model_cfg, Rng(1))

    def test_delta_machinery_self_consistent(self):
        model = self.make_model()
        records = records_for(4)
        report = ablate(model, records)
        # full-vs-full difference through the same machinery is exactly zero
        full = report.full_metrics
        assert full.macro_f1 - full.macro_f1 == 0.0
        for m in range(4):
            r = report.leave_one_out[m]
            assert r.n_evaluated == len(records)
            assert r.delta_f1 is not None

    def test_modality_absent_from_all_samples_flagged(self):
        model = self.make_model()
        records = records_for(4, modalities=(0, 1, 2))
        report = ablate(model, records)
        assert report.single_stain[3] is None
        assert report.leave_one_out[3].n_evaluated == len(records)

    def test_sample_with_single_modality_skipped_in_loo(self):
        model = self.make_model()
        records = records_for(3)
        solo = records_for(1, samples_each=1, modalities=(2,), seed=9)[0]
        report = ablate(model, records + [solo])
        assert report.leave_one_out[2].n_evaluated == len(records)
        assert report.single_stain[2].n_samples == len(records) + 1

    def test_attention_tallies(self):
        model = self.make_model()
        records = records_for(5)
        report = ablate(model, records)
        assert report.attention_counts.sum() == 4 * len(records)
        assert report.attention_argmax_counts.sum() == len(records)
        present_classes = {r.label for r in records}
        for c in present_classes:
            assert np.all(np.isfinite(report.attention_mean[c]))

    def test_empty_test_set_rejected(self):
        with pytest.raises(DataError):
            ablate(self.make_model(), [])


class TestBaselineTraining:
    def test_baselines_share_pipeline(self):
        records = records_for(6)
        split = SplitPlan(
            fold_id=0,
            train=[r.sample_id for r in records[:8]],
            val=[r.sample_id for r in records[8:10]],
            test=[r.sample_id for r in records[10:]],
        )
        model_cfg, train_cfg = tiny_cfgs()
        for kind in ("attention_mil", "single_stream_transformer"):
            result = train_baseline(kind, records, split, model_cfg, train_cfg)
            assert result.model.kind == kind
            assert len(result.history) == 1


class TestExportFeatures:
    def test_row_count_and_width(self):
        model_cfg, _ = tiny_cfgs()
        model = UnicornModel(model_cfg, Rng(2))
        records = records_for(3)  # all four modalities present
        rows = export_features(model, records)
        assert len(rows) == len(records) * (1 + 4)
        assert all(r.vector.shape == (model_cfg.model_dim,) for r in rows)
        descriptors = {r.descriptor for r in rows}
        assert descriptors == {"full", "HE", "EvG", "vK", "Movat"}

    def test_full_only(self):
        model_cfg, _ = tiny_cfgs()
        model = UnicornModel(model_cfg, Rng(3))
        records = records_for(2)
        rows = export_features(model, records, single_modality=False)
        assert len(rows) == len(records)
        assert {r.descriptor for r in rows} == {"full"}

    def test_write_features_file(self, tmp_path):
        model_cfg, _ = tiny_cfgs()
        model = UnicornModel(model_cfg, Rng(4))
        rows = export_features(model, records_for(1))
        write_features(rows, tmp_path / "features.tsv")
        lines = (tmp_path / "features.tsv").read_text().splitlines()
        assert len(lines) == 1 + len(rows)
        cells = lines[1].split("\t")
        assert len(cells) == 3 + model_cfg.model_dim
