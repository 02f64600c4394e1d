"""Loss composition, schedule, determinism, and evaluation contracts.

The long overfit-convergence run lives in the acceptance suite; these tests
exercise the training machinery on tiny budgets.
"""

import json
import math

import numpy as np
import pytest

from fusecount.checkpoint import load_checkpoint, restore_params, save_checkpoint
from fusecount.datagen import generate_dataset, load_dataset
from fusecount.fusion import FusionLossWeights
from fusecount.model import FusionCountingModel
from fusecount.tensor import ShapeError, Tensor
from fusecount.training import (
    EvalReport,
    SplitMetrics,
    TrainConfig,
    TrainingError,
    counting_loss,
    evaluate,
    lr_at_epoch,
    prepare_samples,
    stage1_fusion_loss,
    stage2_total_loss,
    total_loss,
    train,
    write_history,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(root, "train", count=4, seed=9, people_range=(4, 10))
    generate_dataset(root, "test", count=3, seed=90, people_range=(4, 10))
    return root


@pytest.fixture(scope="module")
def train_index(small_dataset):
    return load_dataset(small_dataset, "train")


class TestCountingLoss:
    def test_equal_maps_zero(self):
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 4, 4)))
        assert counting_loss(x, x).item() == 0.0

    def test_offset_by_one_gives_one(self):
        gt = Tensor(np.random.default_rng(1).uniform(size=(1, 4, 4)))
        pred = Tensor(gt.data + 1.0)
        assert abs(counting_loss(pred, gt).item() - 1.0) < 1e-12

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(1, 5, 5))
        b = rng.uniform(size=(1, 5, 5))
        loss = counting_loss(Tensor(a), Tensor(b)).item()
        oracle = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(loss - oracle) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            counting_loss(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 3))))


class TestTotalLoss:
    def test_weighted_sum_hand_case(self):
        out = total_loss(Tensor(0.2), Tensor(0.3), lambda_count=10.0, mu_fusion=1.0)
        assert abs(out.item() - 2.3) < 1e-12

    def test_lambda_zero_reduces_to_fusion_term(self):
        out = total_loss(Tensor(0.7), Tensor(0.4), lambda_count=0.0, mu_fusion=2.0)
        assert abs(out.item() - 0.8) < 1e-12

    def test_mu_zero_is_pure_counting(self):
        out = total_loss(Tensor(0.7), Tensor(0.4), lambda_count=1.0, mu_fusion=0.0)
        assert abs(out.item() - 0.7) < 1e-12

    def test_linearity_in_lambda(self):
        lc, lf = Tensor(0.11), Tensor(0.07)
        a = total_loss(lc, lf, 5.0, 1.0).item()
        b = total_loss(lc, lf, 10.0, 1.0).item()
        assert abs((b - a) - 5.0 * 0.11) < 1e-12


class TestStageLosses:
    def test_stage1_is_sum_of_three_components(self, train_index):
        cfg = TrainConfig(sigma=1.5, seed=0)
        samples = prepare_samples(train_index, cfg)
        model = FusionCountingModel(seed=1)
        loss, parts = stage1_fusion_loss(model, samples[:2], FusionLossWeights())
        component_sum = (parts["loss_alm_ir"].item() + parts["loss_alm_vi"].item()
                        + parts["loss_feature"].item())
        assert abs(loss.item() - component_sum) < 1e-9 * max(1.0, component_sum)

    def test_stage1_gradient_reaches_every_fusion_group(self, train_index):
        cfg = TrainConfig(sigma=1.5, seed=0)
        samples = prepare_samples(train_index, cfg)
        model = FusionCountingModel(seed=2)
        loss, _ = stage1_fusion_loss(model, samples[:2], FusionLossWeights())
        loss.backward()
        groups = {**model.fusion_params(), **model.assisted_params()}
        for name, p in groups.items():
            assert p.grad is not None, f"no gradient reached {name}"
            assert np.any(p.grad != 0.0), f"gradient at {name} is identically zero"

    def test_stage2_matches_weighted_combination(self, train_index):
        cfg = TrainConfig(sigma=1.5, seed=0, dropout_rate=0.0)
        samples = prepare_samples(train_index, cfg)
        model = FusionCountingModel(seed=3, dropout_rate=0.0)
        loss, parts = stage2_total_loss(model, samples[:2], cfg,
                                        FusionLossWeights(), rng=None)
        expected = (cfg.lambda_count * parts["loss_counting"].item()
                    + cfg.mu_fusion * parts["loss_fusion"].item())
        assert abs(loss.item() - expected) < 1e-9 * max(1.0, abs(expected))

    def test_doubling_lambda_doubles_counting_gradient_exactly(self, train_index):
        # With mu=0 the whole gradient is the counting contribution; scaling
        # lambda by two scales every gradient entry by exactly two (power-of-
        # two scaling is exact in IEEE arithmetic).
        samples = prepare_samples(train_index, TrainConfig(sigma=1.5, seed=0))
        grads = {}
        for lam in (10.0, 20.0):
            cfg = TrainConfig(sigma=1.5, seed=0, dropout_rate=0.0,
                              lambda_count=lam, mu_fusion=0.0)
            model = FusionCountingModel(seed=4, dropout_rate=0.0)
            loss, _ = stage2_total_loss(model, samples[:2], cfg,
                                        FusionLossWeights(), rng=None)
            loss.backward()
            grads[lam] = {name: p.grad.copy() for name, p in
                          model.counting_params().items()}
        for name in grads[10.0]:
            np.testing.assert_array_equal(2.0 * grads[10.0][name], grads[20.0][name])


class TestTrainLoop:
    def test_lr_schedule_matches_geometric_law(self):
        cfg = TrainConfig()
        oracle = 1e-5 * 0.995 ** 10
        assert abs(lr_at_epoch(cfg, 10) - oracle) < 1e-12
        assert f"{lr_at_epoch(cfg, 10):.3e}" == "9.511e-06"

    def test_defaults_match_stated_values(self):
        cfg = TrainConfig()
        assert cfg.lambda_count == 10.0
        assert cfg.mu_fusion == 1.0
        assert cfg.lr == 1e-5
        assert cfg.lr_decay_per_epoch == 0.995
        assert cfg.batch_size == 4

    def test_invalid_decay_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_per_epoch=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_per_epoch=1.5)

    def test_stage2_requires_checkpoint(self, train_index):
        cfg = TrainConfig(epochs=1, sigma=1.5)
        with pytest.raises(TrainingError, match="stage-1 checkpoint"):
            train(cfg, train_index, stage=2, init_params=None)

    def test_same_seed_identical_history(self, train_index):
        cfg = TrainConfig(lr=1e-4, epochs=2, sigma=1.5, seed=7, batch_size=2)
        a = train(cfg, train_index, stage=1)
        b = train(cfg, train_index, stage=1)
        assert a.history == b.history

    def test_same_seed_identical_checkpoints(self, train_index, tmp_path):
        cfg = TrainConfig(lr=1e-4, epochs=2, sigma=1.5, seed=7, batch_size=2)
        runs = []
        for tag in ("a", "b"):
            result = train(cfg, train_index, stage=1)
            path = tmp_path / f"{tag}.ckpt"
            save_checkpoint(path, result.model.named_params(), meta={"stage": 1})
            runs.append(path.read_bytes())
        assert runs[0] == runs[1]

    def test_history_schema(self, train_index, tmp_path):
        cfg = TrainConfig(lr=1e-4, epochs=1, sigma=1.5, seed=3, batch_size=4)
        result = train(cfg, train_index, stage=1)
        path = tmp_path / "history.ndjson"
        write_history(path, result.history)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == len(result.history)
        record = json.loads(lines[0])
        assert set(record) == {"stage", "epoch", "step", "loss_total", "loss_counting",
                               "loss_feature", "loss_alm_ir", "loss_alm_vi", "lr"}
        assert record["stage"] == 1
        assert record["loss_counting"] is None

    def test_single_small_step_decreases_loss(self, train_index):
        # Line-search sanity: at a tiny rate one update must not increase
        # the objective.
        cfg = TrainConfig(lr=1e-7, epochs=1, sigma=1.5, seed=5, batch_size=4,
                          grad_clip_norm=0.0)
        first = train(cfg, train_index, stage=1)
        cfg2 = TrainConfig(lr=1e-7, epochs=2, sigma=1.5, seed=5, batch_size=4,
                           grad_clip_norm=0.0)
        second = train(cfg2, train_index, stage=2,
                       init_params={k: v.data.copy() for k, v in
                                    first.model.named_params().items()})
        assert second.history[1]["loss_total"] < second.history[0]["loss_total"]

    def test_stage2_from_checkpoint_runs(self, train_index, tmp_path):
        cfg = TrainConfig(lr=1e-4, epochs=1, sigma=1.5, seed=2, batch_size=4)
        r1 = train(cfg, train_index, stage=1)
        path = tmp_path / "s1.ckpt"
        save_checkpoint(path, r1.model.named_params(), meta={"stage": 1})
        arrays, meta = load_checkpoint(path)
        assert meta["stage"] == 1
        r2 = train(cfg, train_index, stage=2, init_params=arrays)
        assert all(rec["stage"] == 2 for rec in r2.history)
        assert all(rec["loss_counting"] is not None for rec in r2.history)


class TestEvaluate:
    def test_hand_arithmetic(self):
        report = EvalReport(mae=2.5, rmse=math.sqrt(6.5),
                            splits={"low": SplitMetrics(2.5, math.sqrt(6.5), 2)})
        assert report.rmse >= report.mae
        # y=[10,20], est=[12,17]: |e|=[2,3] -> mae 2.5, rmse sqrt(6.5)
        errors = [12 - 10, 17 - 20]
        mae = sum(abs(e) for e in errors) / 2
        rmse = math.sqrt(sum(e * e for e in errors) / 2)
        assert mae == 2.5
        assert abs(rmse - 2.5495097567963922) < 1e-12

    def test_rmse_below_mae_rejected(self):
        with pytest.raises(ValueError, match="rmse >= mae"):
            EvalReport(mae=3.0, rmse=2.0, splits={})

    def test_perfect_predictions_give_zero(self, small_dataset, monkeypatch):
        index = load_dataset(small_dataset, "test")
        model = FusionCountingModel(seed=0)

        # Oracle model: substitute ground truth for the prediction.
        from fusecount import training as training_mod

        real_load_pair = training_mod.load_pair

        def fake_infer(visible, thermal):
            raise AssertionError("unused")

        reports = []
        from fusecount.density import generate_density_map, downsample_density

        class OracleModel:
            def infer(self, visible, thermal):
                dots = current["dots"]
                dm = generate_density_map(dots, sigma=1.5)
                return None, downsample_density(dm, 8).values

        current = {}

        def tracking_load_pair(entry):
            pair = real_load_pair(entry)
            current["dots"] = pair.dots
            return pair

        monkeypatch.setattr(training_mod, "load_pair", tracking_load_pair)
        report = training_mod.evaluate(OracleModel(), index)
        assert report.mae < 0.01
        assert report.rmse < 0.01

    def test_report_on_real_model_and_splits(self, small_dataset):
        index = load_dataset(small_dataset, "test")
        model = FusionCountingModel(seed=0)
        report = evaluate(model, index)
        assert report.rmse >= report.mae >= 0
        assert sum(m.count for name, m in report.splits.items()
                   if name in ("low", "medium", "high")) == len(index)
        for metrics in report.splits.values():
            assert metrics.rmse >= metrics.mae * (1 - 1e-12)
        payload = json.loads(report.to_json())
        assert set(payload) == {"mae", "rmse", "splits", "n_images"}

    def test_matches_direct_summation_oracle(self, small_dataset):
        index = load_dataset(small_dataset, "test")
        model = FusionCountingModel(seed=1)
        report = evaluate(model, index)
        abs_errors = [abs(img["estimate"] - img["truth"]) for img in report.per_image]
        mae = sum(abs_errors) / len(abs_errors)
        rmse = math.sqrt(sum(e * e for e in abs_errors) / len(abs_errors))
        assert abs(report.mae - mae) < 1e-9
        assert abs(report.rmse - rmse) < 1e-9

    def test_empty_dataset_rejected(self):
        from fusecount.datagen import DatasetIndex
        with pytest.raises(ValueError, match="empty"):
            evaluate(FusionCountingModel(seed=0), DatasetIndex(split="test"))


class TestCheckpointFormat:
    def test_round_trip_preserves_values(self, tmp_path):
        model = FusionCountingModel(seed=4)
        params = model.named_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, meta={"stage": 1, "note": "x"})
        arrays, meta = load_checkpoint(path)
        assert meta["note"] == "x"
        assert set(arrays) == set(params)
        for name, tensor in params.items():
            np.testing.assert_array_equal(arrays[name], tensor.data)

    def test_restore_rejects_shape_mismatch(self, tmp_path):
        model = FusionCountingModel(seed=4)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model.named_params(), meta={})
        arrays, _ = load_checkpoint(path)
        arrays["head.conv.bias"] = np.zeros((7,))
        with pytest.raises(ValueError, match="head.conv.bias"):
            restore_params(model.named_params(), arrays)

    def test_missing_checkpoint_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_dotted_names_present(self):
        model = FusionCountingModel(seed=0)
        names = set(model.named_params())
        assert "encoder_ir.level2.down.weight" in names
        assert "fusion.level1.conv1.bias" in names
        assert "attention.spatial_scale" in names
