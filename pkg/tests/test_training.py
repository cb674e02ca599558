"""Tests for train_step, the strategy schedules and the training loop."""

from __future__ import annotations

import copy
import math

import numpy as np
import pytest
import torch

from cris.backbones import BackboneConfig, build_backbone
from cris.data import SplitSpec, split_dataset, synth_shapes
from cris.errors import ConfigError, EmptySplitError, ShapeMismatchError
from cris.losses import EpochLossWeights, loss_bce
from cris.refinement import RefinementConfig, build_refinement, compose
from cris.tensors import Dataset
from cris.training import (
    EpochRecord,
    Strategy,
    TrainConfig,
    TrainHistory,
    evaluate_model,
    predict,
    train,
    train_step,
)
from cris.tuning import SearchSpace, tune


def _batch(splits, k: int = 4):
    return list(splits.train)[:k]


def _snapshot(module: torch.nn.Module) -> dict:
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def _unchanged(before: dict, module: torch.nn.Module) -> bool:
    return all(torch.equal(before[n], p) for n, p in module.named_parameters())


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 4
        assert cfg.learning_rate == 1e-3
        assert cfg.adam_betas == (0.9, 0.999)
        assert cfg.strategy is Strategy.CRIS

    def test_strategy_from_string(self):
        assert TrainConfig(strategy="backbone_only").strategy is Strategy.BACKBONE_ONLY

    @pytest.mark.parametrize(
        "kwargs",
        [{"batch_size": 0}, {"epochs": 0}, {"learning_rate": -1e-3}, {"strategy": "crf"},
         {"baseline_loss": "dice"}, {"adam_betas": (0.9, 1.0)}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_zero_learning_rate_allowed(self):
        assert TrainConfig(learning_rate=0).learning_rate == 0.0

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=3, strategy="backbone_fcn_joint", checkpoint_dir="x")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="momentum"):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_labels(self):
        assert [s.label for s in Strategy] == ["Backbone", "Backbone+FCN", "Proposed"]


class TestTrainStep:
    def test_l1_step_leaves_refinement_untouched(self, make_full_model, splits32):
        model = make_full_model().train()
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        backbone_before = _snapshot(model.backbone)
        refine_before = _snapshot(model.refinement)

        train_step(model, _batch(splits32), EpochLossWeights(1, 0), opt)

        assert _unchanged(refine_before, model.refinement)
        assert all(p.grad is None for p in model.refinement.parameters())
        assert all(len(opt.state[p]) == 0 for p in model.refinement.parameters())
        assert not _unchanged(backbone_before, model.backbone)

    def test_l2_step_updates_both(self, make_full_model, splits32):
        model = make_full_model().train()
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        backbone_before = _snapshot(model.backbone)
        refine_before = _snapshot(model.refinement)

        train_step(model, _batch(splits32), EpochLossWeights(0, 1), opt)

        assert not _unchanged(backbone_before, model.backbone)
        assert not _unchanged(refine_before, model.refinement)

    def test_zero_learning_rate_keeps_parameters(self, make_full_model, splits32):
        model = make_full_model().train()
        opt = torch.optim.Adam(model.parameters(), lr=0.0)
        before = _snapshot(model)
        train_step(model, _batch(splits32), EpochLossWeights(0, 1), opt)
        assert _unchanged(before, model)

    def test_returns_pre_update_loss(self, make_full_model, splits32):
        model = make_full_model(dropout_p=0.0).train()
        reference = copy.deepcopy(model)
        batch = _batch(splits32)
        x = torch.from_numpy(np.stack([s.image.data for s in batch]))
        g = torch.from_numpy(np.stack([s.mask.data for s in batch]))
        with torch.no_grad():
            expected = loss_bce(reference(x)[1], g).item()

        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        got = train_step(model, (x, g), EpochLossWeights(0, 1), opt)
        assert got == pytest.approx(expected, rel=1e-6)

    def test_backbone_baseline(self, make_backbone, splits32):
        b = make_backbone().train()
        opt = torch.optim.Adam(b.parameters(), lr=1e-2)
        before = _snapshot(b)
        loss = train_step(b, _batch(splits32), None, opt, baseline_loss="mse")
        assert 0.0 < loss < 1.0
        assert not _unchanged(before, b)

    def test_full_model_needs_weights(self, make_full_model, splits32):
        model = make_full_model()
        opt = torch.optim.Adam(model.parameters())
        with pytest.raises(ConfigError):
            train_step(model, _batch(splits32), None, opt)


def _cfg(**kw) -> TrainConfig:
    base = dict(epochs=4, batch_size=4, learning_rate=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedules:
    def test_cris_alternates(self, make_full_model, splits32):
        _, history = train(make_full_model(), splits32, _cfg())
        assert history.active_losses() == ["L1", "L2", "L1", "L2"]
        assert [r.epoch for r in history] == [0, 1, 2, 3]

    def test_joint_always_refined_bce(self, make_full_model, splits32):
        _, history = train(make_full_model(), splits32, _cfg(strategy="backbone_fcn_joint"))
        assert history.active_losses() == ["L2"] * 4

    def test_backbone_only(self, make_backbone, splits32):
        _, history = train(make_backbone(), splits32, _cfg(strategy="backbone_only"))
        assert history.active_losses() == ["BCE"] * 4

    def test_head_frozen_on_l1_backbone_moves_every_epoch(self, make_full_model, splits32):
        model = make_full_model()
        heads = [_snapshot(model.refinement)]
        backbones = [_snapshot(model.backbone)]

        def snapshot(rec, m):
            heads.append(_snapshot(m.refinement))
            backbones.append(_snapshot(m.backbone))

        train(model, splits32, _cfg(epochs=6, select_best=False), on_epoch_end=snapshot)

        assert len(heads) == len(backbones) == 7
        for epoch in range(6):
            head_same = all(torch.equal(heads[epoch][n], heads[epoch + 1][n]) for n in heads[0])
            assert head_same == (epoch % 2 == 0), epoch
            backbone_same = all(
                torch.equal(backbones[epoch][n], backbones[epoch + 1][n]) for n in backbones[0]
            )
            assert not backbone_same, epoch

    def test_history_values(self, make_full_model, splits32):
        _, history = train(make_full_model(), splits32, _cfg())
        for r in history:
            assert r.train_loss > 0
            assert 0.0 <= r.val_dice <= 1.0
            assert 0.0 <= r.val_mse <= 1.0

    def test_strategy_model_mismatch(self, make_full_model, make_backbone, splits32):
        with pytest.raises(ConfigError):
            train(make_backbone(), splits32, _cfg(strategy="cris"))
        with pytest.raises(ConfigError):
            train(make_full_model(), splits32, _cfg(strategy="backbone_only"))

    def test_empty_train_split(self, make_full_model, splits32):
        empty = Dataset([], name="empty")
        with pytest.raises(EmptySplitError):
            train(make_full_model(), (empty, splits32.val), _cfg())

    def test_empty_val_split_gives_nan(self, make_full_model, splits32):
        empty = Dataset([], name="empty")
        _, history = train(make_full_model(), (splits32.train, empty), _cfg(epochs=2))
        assert all(math.isnan(r.val_dice) for r in history)

    def test_single_sample_batch_with_deep_backbone(self):
        # 5 training samples at batch 4 leave a one-sample batch; a 1x1
        # bottleneck would make BatchNorm fail there
        splits = split_dataset(synth_shapes(8, (32, 32), seed=0))
        assert len(splits.train) == 5
        model = compose(build_backbone(BackboneConfig("unet", 4, depth=5)),
                        build_refinement(RefinementConfig(4, (5, 3))))
        with pytest.raises(ShapeMismatchError, match="bottleneck"):
            train(model, splits, _cfg(epochs=1))
        model = compose(build_backbone(BackboneConfig("unet", 4, depth=4)),
                        build_refinement(RefinementConfig(4, (5, 3))))
        _, history = train(model, splits, _cfg(epochs=1))
        assert len(history) == 1


class TestReproducibility:
    def test_same_seed_same_run(self, make_full_model, splits32):
        a, ha = train(make_full_model(), splits32, _cfg())
        b, hb = train(make_full_model(), splits32, _cfg())
        assert ha == hb
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_resume_matches_uninterrupted(self, make_full_model, splits32, tmp_path):
        cfg = _cfg(checkpoint_every=1, select_best=False)
        full, full_history = train(
            make_full_model(), splits32, cfg.with_updates(checkpoint_dir=str(tmp_path / "a"))
        )
        assert (tmp_path / "a" / "epoch_001.ckpt").exists()
        assert (tmp_path / "a" / "best.ckpt").exists()

        resumed, resumed_history = train(
            make_full_model(seed=7), splits32, cfg.with_updates(checkpoint_dir=str(tmp_path / "b")),
            resume_from=tmp_path / "a" / "epoch_001.ckpt",
        )
        assert resumed_history == full_history
        for (name, pa), (_, pb) in zip(full.state_dict().items(), resumed.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_select_best_restores_best_epoch(self, make_full_model, splits32):
        best_states = {}
        model, history = train(
            make_full_model(), splits32, _cfg(),
            on_epoch_end=lambda rec, m: best_states.__setitem__(rec.epoch, copy.deepcopy(m.state_dict())),
        )
        best = history.best()
        for name, p in model.state_dict().items():
            assert torch.equal(p, best_states[best.epoch][name]), name


class TestHistory:
    def test_best_prefers_earliest(self):
        h = TrainHistory([
            EpochRecord(0, "L1", 0.5, 0.4, 0.1),
            EpochRecord(1, "L2", 0.4, 0.6, 0.1),
            EpochRecord(2, "L1", 0.3, 0.6, 0.1),
        ])
        assert h.best().epoch == 1

    def test_best_skips_nan(self):
        h = TrainHistory([EpochRecord(0, "L1", 0.5, float("nan"), float("nan"))])
        assert h.best() is None

    def test_csv_round_trip(self, tmp_path):
        h = TrainHistory([EpochRecord(0, "L1", 0.123456789, 0.5, 0.25),
                          EpochRecord(1, "L2", 0.1, 0.625, 0.2)])
        h.to_csv(tmp_path / "history.csv", "abc")
        assert TrainHistory.from_csv(tmp_path / "history.csv") == h


class TestPredictEvaluate:
    def test_predict_refined_output(self, make_full_model, splits32):
        model = make_full_model()
        probs = predict(model, splits32.test)
        model.eval()
        with torch.no_grad():
            _, final = model(torch.from_numpy(splits32.test.images()))
        assert probs.shape == (3, 1, 32, 32)
        assert np.array_equal(probs, final.numpy())

    def test_predict_restores_mode(self, make_full_model, splits32):
        model = make_full_model().train()
        predict(model, splits32.val)
        assert model.training

    def test_evaluate_labels(self, make_full_model, splits32):
        report = evaluate_model(make_full_model(), splits32.train, splits32.test,
                                model="unet", dataset="synth", strategy="cris")
        assert (report.model, report.dataset, report.strategy) == ("unet", "synth", "cris")
        assert len(report.per_image_dice) == 3
        assert report.dice == pytest.approx(np.mean(report.per_image_dice))


# ---------------------------------------------------------------------------
# Desk-scale learning checks (slow)
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def _desk_model(strategy: str, seed: int) -> torch.nn.Module:
    backbone = build_backbone(BackboneConfig("unet", 16, 3, seed=seed))
    if strategy == "backbone_only":
        return backbone
    return compose(backbone, build_refinement(RefinementConfig(seed=seed)))


@pytest.fixture(scope="module")
def desk_runs():
    """Tuned 30-epoch runs per strategy and seed on a 300/60/60 synthetic split."""
    n = 420
    splits = split_dataset(
        synth_shapes(n, (64, 64), seed=11), SplitSpec(300 / n, 60 / n, 60 / n, seed=11)
    )
    assert (len(splits.train), len(splits.val), len(splits.test)) == (300, 60, 60)
    space = SearchSpace(lr_low=1e-4, lr_high=1e-2, trials=4, warmup=3, min_trials=2)

    runs = {}
    for strategy in ("backbone_only", "cris"):
        tuned, _ = tune(space, splits, TrainConfig(epochs=10, strategy=strategy),
                        lambda: _desk_model(strategy, 0))
        for seed in SEEDS:
            cfg = tuned.with_updates(epochs=30, seed=seed)
            model, history = train(_desk_model(strategy, seed), splits, cfg)
            report = evaluate_model(model, splits.train, splits.test)
            runs[strategy, seed] = (history, report.dice)
    return runs


@pytest.mark.slow
class TestDeskScaleLearning:
    def test_validation_dice_improves(self, desk_runs):
        for seed in SEEDS:
            history, _ = desk_runs["cris", seed]
            assert history[-1].val_dice > history[0].val_dice, seed

    def test_cris_reaches_dice_floor(self, desk_runs):
        assert np.mean([desk_runs["cris", s][1] for s in SEEDS]) >= 0.75

    def test_cris_not_worse_than_backbone_only(self, desk_runs):
        cris = np.mean([desk_runs["cris", s][1] for s in SEEDS])
        baseline = np.mean([desk_runs["backbone_only", s][1] for s in SEEDS])
        assert cris >= baseline - 0.02
