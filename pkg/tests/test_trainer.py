"""Optimizer arithmetic, the training loop, and its bookkeeping."""

import dataclasses
import re

import numpy as np
import pytest
import torch

from owseg import (
    LossConfig,
    ModelConfig,
    TrainConfig,
    TrainingError,
    generate_synthetic,
    make_split,
    save_checkpoint,
    sgd_step,
    train,
)
from owseg.trainer import _remap_labels, gather_class_embeddings


def named_tensors(gen, shapes):
    return {name: torch.randn(shape, generator=gen) for name, shape in shapes.items()}


SHAPES = {"w": (3, 2), "b": (3,), "scale": ()}


class TestSgdStep:
    def test_plain_gradient_descent(self):
        gen = torch.Generator().manual_seed(0)
        params = named_tensors(gen, SHAPES)
        grads = named_tensors(gen, SHAPES)
        velocity = {n: torch.zeros_like(p) for n, p in params.items()}
        new_params, new_velocity = sgd_step(params, grads, velocity, 0.1, 0.0, 0.0)
        for name in params:
            d = 0.1 * (grads[name] + 0.0 * params[name])
            vel = 0.0 * velocity[name] - d
            assert torch.equal(new_velocity[name], vel)
            assert torch.equal(new_params[name], params[name] + 0.0 * vel - d)

    def test_weight_decay_shrinks_parameters(self):
        gen = torch.Generator().manual_seed(1)
        params = named_tensors(gen, SHAPES)
        grads = {n: torch.zeros_like(p) for n, p in params.items()}
        velocity = {n: torch.zeros_like(p) for n, p in params.items()}
        new_params, _ = sgd_step(params, grads, velocity, 0.5, 0.0, 0.1)
        for name in params:
            assert torch.allclose(new_params[name], params[name] * (1 - 0.5 * 0.1))
            assert (new_params[name].abs() <= params[name].abs() + 1e-8).all()

    def test_two_steps_match_manual_recurrence(self):
        gen = torch.Generator().manual_seed(2)
        params = named_tensors(gen, SHAPES)
        velocity = {n: torch.zeros_like(p) for n, p in params.items()}
        ref_params = {n: p.clone() for n, p in params.items()}
        ref_velocity = {n: v.clone() for n, v in velocity.items()}
        lr, mu, wd = 0.05, 0.9, 0.01
        for seed in (3, 4):
            grads = named_tensors(torch.Generator().manual_seed(seed), SHAPES)
            params, velocity = sgd_step(params, grads, velocity, lr, mu, wd)
            for name in ref_params:
                d = lr * (grads[name] + wd * ref_params[name])
                ref_velocity[name] = mu * ref_velocity[name] - d
                ref_params[name] = ref_params[name] + mu * ref_velocity[name] - d
        for name in ref_params:
            assert torch.equal(params[name], ref_params[name])
            assert torch.equal(velocity[name], ref_velocity[name])

    def test_zero_lr_zero_velocity_is_identity(self):
        gen = torch.Generator().manual_seed(5)
        params = named_tensors(gen, SHAPES)
        grads = named_tensors(gen, SHAPES)
        velocity = {n: torch.zeros_like(p) for n, p in params.items()}
        new_params, new_velocity = sgd_step(params, grads, velocity, 0.0, 0.9, 0.01)
        for name in params:
            assert torch.equal(new_params[name], params[name])
            assert torch.equal(new_velocity[name], velocity[name])

    def test_quadratic_bowl_converges_to_minimum(self):
        target = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)
        params = {"x": torch.zeros(3, dtype=torch.float64)}
        velocity = {"x": torch.zeros(3, dtype=torch.float64)}
        for _ in range(200):
            grads = {"x": params["x"] - target}
            params, velocity = sgd_step(params, grads, velocity, 0.1, 0.9, 0.0)
        assert torch.allclose(params["x"], target, atol=1e-6)

    def test_misaligned_grad_shape_rejected(self):
        params = {"w": torch.zeros(3, 2)}
        grads = {"w": torch.zeros(2, 3)}
        velocity = {"w": torch.zeros(3, 2)}
        with pytest.raises(ValueError, match="misaligned.*w"):
            sgd_step(params, grads, velocity, 0.1, 0.9, 0.0)

    def test_misaligned_velocity_shape_rejected(self):
        params = {"w": torch.zeros(3, 2)}
        grads = {"w": torch.zeros(3, 2)}
        velocity = {"w": torch.zeros(3)}
        with pytest.raises(ValueError, match="misaligned"):
            sgd_step(params, grads, velocity, 0.1, 0.9, 0.0)

    def test_non_finite_gradient_rejected(self):
        params = {"w": torch.zeros(2), "b": torch.zeros(2)}
        grads = {"w": torch.zeros(2), "b": torch.tensor([0.0, float("inf")])}
        velocity = {n: torch.zeros_like(p) for n, p in params.items()}
        with pytest.raises(FloatingPointError, match="non-finite gradient.*b"):
            sgd_step(params, grads, velocity, 0.1, 0.9, 0.0)


class TestGatherClassEmbeddings:
    def test_rows_grouped_by_label(self):
        emb = torch.arange(24, dtype=torch.float32).reshape(2, 3, 4)
        labels = torch.tensor([[0, 0, 2, 2], [2, 0, 0, 0]])
        mask = torch.ones(2, 4, dtype=torch.bool)
        out = gather_class_embeddings(emb, labels, mask)
        assert sorted(out) == [0, 2]
        flat = emb.permute(0, 2, 1).reshape(-1, 3)
        flat_labels = labels.reshape(-1)
        for c in (0, 2):
            assert torch.equal(out[c], flat[flat_labels == c])

    def test_masked_frames_excluded(self):
        emb = torch.randn(1, 2, 4)
        labels = torch.tensor([[0, 1, 0, 1]])
        mask = torch.tensor([[True, False, True, False]])
        out = gather_class_embeddings(emb, labels, mask)
        assert sorted(out) == [0]
        assert out[0].shape == (2, 2)

    def test_empty_mask_gives_empty_dict(self):
        out = gather_class_embeddings(
            torch.randn(1, 2, 3),
            torch.zeros(1, 3, dtype=torch.long),
            torch.zeros(1, 3, dtype=torch.bool),
        )
        assert out == {}


def test_remap_labels_sends_unknown_to_minus_one():
    labels = torch.tensor([[3, 5, 9], [5, 3, 3]])
    out = _remap_labels(labels, {3: 0, 5: 1})
    assert torch.equal(out, torch.tensor([[0, 1, -1], [1, 0, 0]]))


def trainer_config(**overrides):
    base = dict(
        batch_size=4,
        epochs=40,
        lr0=0.02,
        lr_decay=0.98,
        seed=0,
        mixup_enabled=False,
        tc_loss_enabled=False,
        model=ModelConfig(
            channel_plan=(8, 12, 16),
            temporal_kernel=3,
            attention_channels=8,
            cluster_embedding_dim=8,
            detector_embedding_dim=8,
            decoder="teu",
        ),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_split():
    seqs = generate_synthetic(
        seed=2, num_classes=4, frames_per_segment=8, V=4, noise_std=0.05,
        num_sequences=120,
    )
    return make_split(seqs, {3}, (0.6, 0.2))


@pytest.fixture(scope="module")
def trained(small_split):
    return train(small_split, trainer_config())


class TestTrainLoop:
    def test_learns_separable_classes(self, trained):
        assert trained.checkpoint.val_acc > 0.9

    def test_checkpoint_is_best_epoch(self, trained):
        history = trained.history
        best_acc = max(s.val_acc for s in history)
        assert trained.checkpoint.val_acc == best_acc
        # ties broken by lower val loss, then earliest epoch
        candidates = [s for s in history if s.val_acc == best_acc]
        expected = min(candidates, key=lambda s: (s.val_loss, s.epoch))
        assert trained.checkpoint.epoch == expected.epoch
        assert trained.checkpoint.val_loss == expected.val_loss

    def test_best_epoch_precedes_overfit_tail(self, trained):
        assert trained.checkpoint.val_acc >= trained.history[-1].val_acc

    def test_lr_schedule_is_exact_geometric_decay(self, trained):
        cfg = trainer_config()
        for stats in trained.history:
            assert stats.lr == cfg.lr0 * cfg.lr_decay**stats.epoch

    def test_history_covers_every_epoch_in_order(self, trained):
        assert [s.epoch for s in trained.history] == list(range(40))

    def test_clustering_columns_zero_when_disabled(self, trained):
        assert all(s.l_intra == 0.0 for s in trained.history)
        assert all(s.l_inter == 0.0 for s in trained.history)

    def test_checkpoint_records_split_facts(self, trained):
        assert trained.checkpoint.known_classes == (0, 1, 2)
        assert trained.checkpoint.joints == 4
        assert trained.checkpoint.config == trainer_config()

    def test_log_csv_round_trips_exact_floats(self, trained):
        lines = trained.log_csv().splitlines()
        assert lines[0] == "epoch,lr,train_loss,ce,l_intra,l_inter,val_acc"
        assert len(lines) == 1 + len(trained.history)
        fields = lines[15].split(",")
        stats = trained.history[14]
        assert int(fields[0]) == 14
        assert float(fields[1]) == stats.lr
        assert float(fields[2]) == stats.train_loss
        assert float(fields[3]) == stats.ce
        assert float(fields[6]) == stats.val_acc

    def test_clustering_columns_active_when_enabled(self, small_split):
        cfg = trainer_config(
            epochs=3, mixup_enabled=True, tc_loss_enabled=True,
            loss=LossConfig(beta=0.05, gamma=0.9, delta=1.0, mixup_alpha=0.5),
        )
        result = train(small_split, cfg)
        assert any(s.l_intra > 0.0 for s in result.history)
        assert any(s.l_inter > 0.0 for s in result.history)
        assert all(np.isfinite(s.train_loss) for s in result.history)

    def test_identical_runs_yield_identical_checkpoints(self, small_split, tmp_path):
        paths = []
        for run in ("a", "b"):
            result = train(small_split, trainer_config(epochs=6))
            path = tmp_path / f"{run}.ckpt"
            save_checkpoint(result.checkpoint, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_divergent_run_reports_epoch_and_step(self, small_split):
        cfg = trainer_config(epochs=3, lr0=1e8, lr_decay=1.0)
        with pytest.raises(TrainingError, match=r"at epoch 0, step \d+"):
            train(small_split, cfg)

    def test_empty_train_rejected(self, small_split):
        broken = dataclasses.replace(small_split, train=())
        with pytest.raises(ValueError, match="non-empty"):
            train(broken, trainer_config())

    def test_empty_val_rejected(self, small_split):
        broken = dataclasses.replace(small_split, val=())
        with pytest.raises(ValueError, match="non-empty"):
            train(broken, trainer_config())
