import csv

import numpy as np
import pytest
import torch

from urbangraph import (
    Checkpoint,
    EncoderConfig,
    LossWeights,
    TrainConfig,
    compute_embeddings,
    export_embeddings,
    grad_check,
    load_embeddings,
    pretrain,
    restore_model,
)
from urbangraph.train import LOSS_NAMES, TrainingError

from .conftest import small_train_config


class TestConfigValidation:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_zero_lr_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)

    def test_defaults_match_documented_settings(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.01
        assert cfg.epochs == 1000
        assert cfg.encoder.dim == 128
        assert cfg.encoder.n_layers == 2
        assert cfg.encoder.n_heads == 8
        assert cfg.encoder.dropout == 0.2
        assert cfg.loss_weights.temperature == 0.4
        assert cfg.loss_weights.intra_segment == 0.25
        assert cfg.augmentation.p_truncate == 0.7
        assert (cfg.augmentation.view1.p_edge,
                cfg.augmentation.view1.p_feature) == (0.3, 0.4)
        assert (cfg.augmentation.view2.p_edge,
                cfg.augmentation.view2.p_feature) == (0.4, 0.3)


class TestPretrain:
    def test_zero_loss_weights_leave_parameters_unchanged(self, tiny_graph):
        cfg = small_train_config(
            epochs=1, loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0))
        before = pretrain(tiny_graph, cfg)
        cfg2 = small_train_config(
            epochs=2, loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0))
        after = pretrain(tiny_graph, cfg2)
        for k in before.model_state:
            assert torch.equal(before.model_state[k], after.model_state[k]), k

    def test_same_seed_identical_history(self, tiny_graph):
        cfg = small_train_config(epochs=4)
        a = pretrain(tiny_graph, cfg)
        b = pretrain(tiny_graph, cfg)
        assert a.loss_history == b.loss_history

    def test_loss_history_structure(self, tiny_graph):
        cfg = small_train_config(epochs=3)
        ck = pretrain(tiny_graph, cfg)
        assert len(ck.loss_history) == 3
        for row in ck.loss_history:
            for name in LOSS_NAMES + ("total", "epoch"):
                assert name in row
            assert np.isfinite(row["total"])

    def test_metrics_csv(self, tiny_graph, tmp_path):
        cfg = small_train_config(epochs=3)
        ck = pretrain(tiny_graph, cfg, metrics_path=tmp_path / "m.csv")
        with open(tmp_path / "m.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert set(rows[0]) == {"epoch", *LOSS_NAMES, "total"}
        assert float(rows[-1]["total"]) == pytest.approx(
            ck.loss_history[-1]["total"])

    def test_descent_on_small_city(self, small_graph):
        cfg = small_train_config(epochs=60)
        ck = pretrain(small_graph, cfg)
        assert ck.loss_history[-1]["total"] < ck.loss_history[0]["total"]


class TestCheckpoint:
    def test_round_trip(self, tiny_graph, tmp_path):
        cfg = small_train_config(epochs=2)
        ck = pretrain(tiny_graph, cfg)
        ck.save(tmp_path / "ck.pt")
        loaded = Checkpoint.load(tmp_path / "ck.pt")
        assert loaded.epoch == ck.epoch
        assert loaded.config == cfg
        for k in ck.model_state:
            assert torch.equal(loaded.model_state[k], ck.model_state[k])

    def test_resume_matches_uninterrupted(self, tiny_graph, tmp_path):
        cfg = small_train_config(epochs=6, checkpoint_every=3)
        full = pretrain(tiny_graph, cfg, checkpoint_dir=tmp_path)
        mid = Checkpoint.load(tmp_path / "checkpoint_000003.pt")
        resumed = pretrain(tiny_graph, cfg, resume_from=mid)
        assert resumed.loss_history == full.loss_history
        for k in full.model_state:
            assert torch.equal(resumed.model_state[k], full.model_state[k])

    def test_graph_mismatch_rejected(self, tiny_graph, small_graph):
        cfg = small_train_config(epochs=1)
        ck = pretrain(tiny_graph, cfg)
        with pytest.raises(TrainingError):
            restore_model(ck, small_graph)


class TestEmbeddings:
    def test_export_twice_identical(self, tiny_graph, tmp_path):
        ck = pretrain(tiny_graph, small_train_config(epochs=2))
        export_embeddings(ck, tiny_graph, tmp_path / "a.csv")
        export_embeddings(ck, tiny_graph, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == \
            (tmp_path / "b.csv").read_bytes()

    def test_row_counts_and_round_trip(self, tiny_graph, tmp_path):
        ck = pretrain(tiny_graph, small_train_config(epochs=2))
        export_embeddings(ck, tiny_graph, tmp_path / "e.csv")
        seg, par = load_embeddings(tmp_path / "e.csv")
        assert seg.shape == (tiny_graph.n_segments, 16)
        assert par.shape == (tiny_graph.n_parcels, 16)
        model = restore_model(ck, tiny_graph)
        hs, hr = compute_embeddings(model, tiny_graph)
        assert seg == pytest.approx(hs, abs=1e-12)
        assert par == pytest.approx(hr, abs=1e-12)


class TestGradCheck:
    def test_zero_loss_config_zero_gradients(self, tiny_graph):
        cfg = small_train_config(
            encoder=EncoderConfig(dim=8, n_heads=2, feature_dim=4, bias_dim=4,
                                  n_dist_buckets=5, n_angle_buckets=8,
                                  dropout=0.0),
            loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0))
        report = grad_check(tiny_graph, cfg)
        assert report.max_relative_error == 0.0

    def test_small_city_under_tolerance(self, tiny_graph):
        cfg = small_train_config(
            encoder=EncoderConfig(dim=8, n_heads=2, feature_dim=4, bias_dim=4,
                                  n_dist_buckets=5, n_angle_buckets=8,
                                  dropout=0.0))
        report = grad_check(tiny_graph, cfg)
        assert report.max_relative_error < 1e-4

    def test_report_names_every_parameter(self, tiny_graph):
        cfg = small_train_config(
            encoder=EncoderConfig(dim=8, n_heads=2, feature_dim=4, bias_dim=4,
                                  n_dist_buckets=5, n_angle_buckets=8,
                                  dropout=0.0))
        report = grad_check(tiny_graph, cfg)
        from urbangraph.train import PretrainModel
        torch.manual_seed(cfg.seed)
        model = PretrainModel(cfg, tiny_graph)
        expected = {name for name, _ in model.named_parameters()}
        assert set(report.per_group) == expected
