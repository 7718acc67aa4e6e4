"""Training objective: clustering terms, masked cross-entropy, and Mixup."""

import numpy as np
import pytest
import torch

from owseg import (
    ClassPrototype,
    LossConfig,
    ModelConfig,
    PrototypeStateError,
    build_model,
    inter_loss,
    intra_loss,
    mixup_pair,
    total_loss,
    update_class_means,
)
from owseg.losses import (
    masked_cross_entropy,
    one_hot_labels,
    sample_mixup_lambdas,
)

from conftest import max_fd_relative_error


def protos(means):
    return {c: ClassPrototype(c, torch.as_tensor(m, dtype=torch.float32)) for c, m in means.items()}


class TestClassMeans:
    def test_gamma_zero_returns_batch_mean_exactly(self):
        rows = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        updated = update_class_means(protos({0: [0.0, 0.0]}), {0: rows}, gamma=0.0)
        assert torch.equal(updated[0].mean, rows.mean(dim=0))

    def test_unchanged_batch_mean_is_exact_fixed_point(self):
        mean = torch.tensor([0.1, 0.7, -0.3])
        rows = torch.stack([mean + 0.5, mean - 0.5])  # batch mean == mean bitwise
        updated = update_class_means(protos({2: mean}), {2: rows}, gamma=0.9)
        assert torch.equal(updated[2].mean, mean)

    def test_momentum_interpolation(self):
        old = torch.tensor([0.0, 0.0])
        rows = torch.tensor([[1.0, 2.0]])
        updated = update_class_means(protos({0: old}), {0: rows}, gamma=0.75)
        assert torch.allclose(updated[0].mean, torch.tensor([0.25, 0.5]))

    def test_first_sight_skips_momentum(self):
        rows = torch.tensor([[4.0, 6.0]])
        updated = update_class_means({}, {1: rows}, gamma=0.99)
        assert torch.equal(updated[1].mean, rows[0])

    def test_absent_class_untouched(self):
        start = protos({0: [1.0], 1: [2.0]})
        updated = update_class_means(start, {0: torch.tensor([[3.0]])}, gamma=0.5)
        assert torch.equal(updated[1].mean, start[1].mean)

    def test_update_detaches_graph(self):
        rows = torch.randn(3, 2, requires_grad=True)
        updated = update_class_means({}, {0: rows}, gamma=0.0)
        assert not updated[0].mean.requires_grad

    def test_gamma_validation(self):
        with pytest.raises(ValueError, match="gamma"):
            update_class_means({}, {0: torch.randn(1, 2)}, gamma=1.0)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dim"):
            update_class_means(protos({0: [1.0, 2.0]}), {0: torch.randn(2, 3)}, gamma=0.5)


class TestIntraLoss:
    def test_zero_iff_embeddings_equal_means(self):
        means = protos({0: [1.0, 0.0], 1: [0.0, 1.0]})
        at_mean = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        labels = torch.tensor([0, 1, 0])
        assert intra_loss(at_mean, labels, means).item() == 0.0

        off = at_mean.clone()
        off[2, 0] += 1e-3
        assert intra_loss(off, labels, means).item() > 0.0

    def test_average_per_class_then_over_classes(self):
        means = protos({0: [0.0], 1: [0.0]})
        emb = torch.tensor([[1.0], [1.0], [3.0]])
        labels = torch.tensor([0, 0, 1])
        # class 0: mean squared deviation 1; class 1: 9; average 5
        assert intra_loss(emb, labels, means).item() == pytest.approx(5.0)

    def test_missing_prototype_raises(self):
        with pytest.raises(PrototypeStateError, match="class 1"):
            intra_loss(torch.randn(2, 2), torch.tensor([0, 1]), protos({0: [0.0, 0.0]}))

    def test_uninitialized_prototype_raises(self):
        p = {0: ClassPrototype(0, torch.zeros(2), initialized=False)}
        with pytest.raises(PrototypeStateError):
            intra_loss(torch.randn(1, 2), torch.tensor([0]), p)


class TestInterLoss:
    def test_two_class_example(self):
        # squared distance 4 at delta 1: ordered pairs contribute 2 * 1/5,
        # scaled by 1/N with N=2 classes
        means = [torch.tensor([0.0, 0.0]), torch.tensor([2.0, 0.0])]
        assert inter_loss(means, delta=1.0).item() == pytest.approx(0.2, abs=1e-7)

    def test_decreases_as_means_separate(self):
        close = [torch.tensor([0.0]), torch.tensor([1.0])]
        far = [torch.tensor([0.0]), torch.tensor([5.0])]
        assert inter_loss(far, 1.0).item() < inter_loss(close, 1.0).item()

    def test_single_mean_warns_and_returns_zero(self):
        with pytest.warns(UserWarning, match=">= 2"):
            value = inter_loss([torch.tensor([1.0])], 1.0)
        assert value.item() == 0.0

    def test_delta_validation(self):
        with pytest.raises(ValueError, match="delta"):
            inter_loss([torch.zeros(1), torch.ones(1)], 0.0)

    def test_mapping_input_ignores_uninitialized(self):
        p = {
            0: ClassPrototype(0, torch.tensor([0.0, 0.0])),
            1: ClassPrototype(1, torch.tensor([2.0, 0.0])),
            2: ClassPrototype(2, torch.tensor([9.0, 9.0]), initialized=False),
        }
        assert inter_loss(p, 1.0).item() == pytest.approx(0.2, abs=1e-7)


class TestMaskedCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        logits = torch.zeros(2, 5, 6)
        labels = torch.randint(0, 5, (2, 6))
        assert masked_cross_entropy(logits, labels).item() == pytest.approx(np.log(5), abs=1e-6)

    def test_mask_excludes_frames(self):
        logits = torch.randn(1, 3, 4)
        labels = torch.tensor([[0, 1, 2, -1]])
        mask = torch.tensor([[True, True, True, False]])
        full = masked_cross_entropy(logits[:, :, :3], labels[:, :3])
        masked = masked_cross_entropy(logits, labels, mask)
        assert masked.item() == pytest.approx(full.item(), abs=1e-6)

    def test_soft_one_hot_matches_hard(self):
        logits = torch.randn(2, 4, 5)
        labels = torch.randint(0, 4, (2, 5))
        soft = one_hot_labels(labels, 4)
        hard_value = masked_cross_entropy(logits, labels)
        soft_value = masked_cross_entropy(logits, soft)
        assert soft_value.item() == pytest.approx(hard_value.item(), abs=1e-6)

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError, match="masked out"):
            masked_cross_entropy(torch.randn(1, 2, 3), torch.zeros(1, 3, dtype=torch.long),
                                 torch.zeros(1, 3, dtype=torch.bool))


class TestTotalLoss:
    def setup_method(self):
        self.logits = torch.randn(2, 3, 4)
        self.labels = torch.randint(0, 3, (2, 4))
        self.embeddings = torch.randn(2, 2, 4)
        self.prototypes = protos({0: [0.0, 0.0], 1: [1.0, 0.0], 2: [0.0, 1.0]})

    def test_beta_zero_reduces_to_cross_entropy(self):
        cfg = LossConfig(beta=0.0)
        out = total_loss(self.logits, self.labels, self.embeddings, self.prototypes, cfg)
        ce = masked_cross_entropy(self.logits, self.labels)
        assert torch.equal(out.total, out.cross_entropy)
        assert out.total.item() == pytest.approx(ce.item(), abs=1e-7)
        assert out.intra.item() == 0.0 and out.inter.item() == 0.0

    def test_total_is_ce_plus_beta_terms(self):
        cfg = LossConfig(beta=0.3)
        out = total_loss(self.logits, self.labels, self.embeddings, self.prototypes, cfg)
        expected = out.cross_entropy + 0.3 * (out.intra + out.inter)
        assert out.total.item() == pytest.approx(expected.item(), rel=1e-6)

    def test_soft_labels_need_embedding_labels(self):
        soft = one_hot_labels(self.labels, 3)
        with pytest.raises(ValueError, match="embedding_labels"):
            total_loss(self.logits, soft, self.embeddings, self.prototypes, LossConfig(beta=0.1))

    def test_soft_labels_with_separate_embedding_stream(self):
        soft = one_hot_labels(self.labels, 3)
        out = total_loss(
            self.logits,
            soft,
            self.embeddings,
            self.prototypes,
            LossConfig(beta=0.1),
            embedding_labels=self.labels,
        )
        assert torch.isfinite(out.total)
        assert out.intra.item() > 0.0

    def test_single_present_class_skips_inter(self):
        labels = torch.zeros(2, 4, dtype=torch.long)
        out = total_loss(self.logits, labels, self.embeddings, self.prototypes,
                         LossConfig(beta=0.5))
        assert out.inter.item() == 0.0


class TestMixup:
    def test_endpoints(self):
        x_i, x_j = torch.randn(3, 4), torch.randn(3, 4)
        y_i, y_j = torch.randn(3, 2), torch.randn(3, 2)
        mx, my = mixup_pair(x_i, y_i, x_j, y_j, 1.0)
        assert torch.equal(mx, x_i) and torch.equal(my, y_i)
        mx, my = mixup_pair(x_i, y_i, x_j, y_j, 0.0)
        assert torch.equal(mx, x_j) and torch.equal(my, y_j)

    def test_midpoint(self):
        x_i, x_j = torch.zeros(2), torch.ones(2)
        mx, _ = mixup_pair(x_i, x_i, x_j, x_j, 0.5)
        assert torch.allclose(mx, torch.full((2,), 0.5))

    def test_lambda_range_checked(self):
        x = torch.zeros(2)
        with pytest.raises(ValueError, match="lambda"):
            mixup_pair(x, x, x, x, 1.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            mixup_pair(torch.zeros(2), torch.zeros(2), torch.zeros(3), torch.zeros(2), 0.5)

    def test_mixed_one_hot_rows_stay_distributions(self, rng):
        y_i = one_hot_labels(torch.randint(0, 3, (2, 5)), 3)
        y_j = one_hot_labels(torch.randint(0, 3, (2, 5)), 3)
        _, my = mixup_pair(torch.zeros(2, 5), y_i, torch.zeros(2, 5), y_j, 0.3)
        assert torch.allclose(my.sum(dim=1), torch.ones(2, 5), atol=1e-6)
        assert (my >= 0).all()

    def test_beta_samples_in_unit_interval_with_half_mean(self, rng):
        lams = sample_mixup_lambdas(rng, alpha=0.5, count=20000)
        assert ((lams >= 0) & (lams <= 1)).all()
        assert abs(lams.mean() - 0.5) < 0.01  # Beta(a, a) is symmetric around 1/2

    def test_alpha_validation(self, rng):
        with pytest.raises(ValueError, match="alpha"):
            sample_mixup_lambdas(rng, alpha=0.0, count=1)


def test_total_loss_gradients_match_finite_differences(tiny_graph):
    config = ModelConfig(
        channel_plan=(3, 4, 5),
        temporal_kernel=3,
        attention_channels=3,
        cluster_embedding_dim=3,
        detector_embedding_dim=3,
        decoder="teu",
    )
    model = build_model(tiny_graph, 3, config, seed=1).double()
    gen = torch.Generator().manual_seed(9)
    coords = torch.randn(2, 3, 8, 4, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, 3, (2, 8), generator=gen)
    mask = torch.ones(2, 8, dtype=torch.bool)
    mask[1, 6:] = False
    prototypes = {
        c: ClassPrototype(c, torch.randn(3, generator=gen, dtype=torch.float64))
        for c in range(3)
    }
    cfg = LossConfig(beta=0.2, gamma=0.9, delta=1.0)

    def loss_fn():
        out = model(coords)
        return total_loss(out.logits, labels, out.cluster_embedding, prototypes, cfg, mask).total

    assert max_fd_relative_error(model, loss_fn) < 1e-4
