import math

import numpy as np
import pytest
import torch
from torch import nn

from dcfs.errors import ConfigurationError
from dcfs.fdc import (MixupConfig, cross_entropy, draw_mix_coeff, loss_fdc,
                      loss_mixup, loss_single, mixup_batch, mixup_pair)
from helpers import analytic_grads, assert_grads_close, finite_diff_grads


class LinearProbModel(nn.Module):
    """Flatten -> linear -> softmax; a minimal prediction stub."""

    def __init__(self, in_dim: int, classes: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.linear = nn.Linear(in_dim, classes)
        with torch.no_grad():
            self.linear.weight.copy_(torch.randn(classes, in_dim, generator=gen) * 0.3)
            self.linear.bias.copy_(torch.randn(classes, generator=gen) * 0.1)

    def predict_whole_from(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.linear(x.flatten(1)), dim=1)


def rand_probs(batch, classes, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(batch, classes, generator=gen,
                                     dtype=dtype) * 2, dim=1)


class TestCrossEntropy:
    def test_matching_onehots_give_zero(self):
        p = torch.zeros(2, 5)
        p[:, 3] = 1.0
        assert cross_entropy(p, p).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_self_entropy_is_log_c(self):
        u = torch.full((4, 10), 0.1)
        assert cross_entropy(u, u).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_hand_value_log_two(self):
        target = torch.tensor([[1.0, 0.0]])
        pred = torch.tensor([[0.5, 0.5]])
        assert cross_entropy(target, pred).item() == pytest.approx(math.log(2), abs=1e-7)

    def test_zero_prediction_stays_finite(self):
        target = torch.tensor([[1.0, 0.0]])
        pred = torch.tensor([[0.0, 1.0]])
        assert math.isfinite(cross_entropy(target, pred).item())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            cross_entropy(torch.rand(2, 3), torch.rand(2, 4))


class TestLossSingle:
    def test_self_consistent_prediction_gives_entropy_floor(self):
        p = rand_probs(6, 5, seed=1)
        entropy = -(p * p.log()).sum(dim=1).mean()
        assert loss_single(p, p).item() == pytest.approx(entropy.item(), abs=1e-6)

    def test_uniform_prediction_gives_log_c_for_any_target(self):
        y = torch.full((4, 10), 0.1)
        for seed in range(3):
            p = rand_probs(4, 10, seed=seed)
            assert loss_single(p, y).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_float64_oracle(self):
        p = rand_probs(32, 7, seed=2, dtype=torch.float64)
        y = rand_probs(32, 7, seed=3, dtype=torch.float64)
        expected = -(p.numpy() * np.log(np.maximum(y.numpy(), 1e-12))).sum(1).mean()
        assert loss_single(p, y).item() == pytest.approx(expected, abs=1e-10)

    def test_anchor_receives_no_gradient(self):
        # whole-feature side is the detached anchor; combined side learns
        whole_logits = torch.randn(4, 5, requires_grad=True)
        whole = torch.softmax(whole_logits, dim=1)
        combined = rand_probs(4, 5, seed=4).clone().requires_grad_(True)
        loss_single(combined, whole).backward()
        assert whole_logits.grad is None or torch.all(whole_logits.grad == 0)
        assert combined.grad is not None and combined.grad.abs().sum() > 0

    def test_symmetric_flag_lets_anchor_carry_gradient(self):
        whole_logits = torch.randn(4, 5, requires_grad=True)
        whole = torch.softmax(whole_logits, dim=1)
        combined = rand_probs(4, 5, seed=4)
        loss_single(combined, whole, symmetric=True).backward()
        assert whole_logits.grad is not None and whole_logits.grad.abs().sum() > 0


class TestMixup:
    def test_coeff_one_is_identity_endpoint(self):
        x_i, x_j = torch.rand(3, 2, 4, 4), torch.rand(3, 2, 4, 4)
        y_i, y_j = rand_probs(3, 5, seed=1), rand_probs(3, 5, seed=2)
        x_mix, y_mix = mixup_pair(x_i, x_j, y_i, y_j, coeff=1.0)
        assert torch.equal(x_mix, x_i)
        assert torch.equal(y_mix, y_i)

    def test_half_mix_of_disjoint_onehots(self):
        y_i = torch.zeros(1, 10)
        y_i[0, 2] = 1.0
        y_j = torch.zeros(1, 10)
        y_j[0, 7] = 1.0
        _, y_mix = mixup_pair(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4),
                              y_i, y_j, coeff=0.5)
        assert y_mix[0, 2].item() == pytest.approx(0.5)
        assert y_mix[0, 7].item() == pytest.approx(0.5)

    def test_beta_one_one_is_uniform_monte_carlo(self):
        rng = MixupConfig(alpha=1.0, seed=9).make_rng()
        draws = np.array([draw_mix_coeff(rng, 1.0) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01

    def test_mixed_label_respects_convexity_bounds(self):
        rng = np.random.default_rng(5)
        y_i, y_j = rand_probs(8, 6, seed=6), rand_probs(8, 6, seed=7)
        for _ in range(10):
            coeff = draw_mix_coeff(rng, 1.0)
            _, y_mix = mixup_pair(torch.rand(8, 1, 2, 2), torch.rand(8, 1, 2, 2),
                                  y_i, y_j, coeff)
            lo = torch.minimum(y_i, y_j) - 1e-7
            hi = torch.maximum(y_i, y_j) + 1e-7
            assert (y_mix >= lo).all() and (y_mix <= hi).all()

    def test_mixed_label_is_detached(self):
        y_i = rand_probs(2, 4, seed=1).requires_grad_(True)
        _, y_mix = mixup_pair(torch.rand(2, 1, 2, 2), torch.rand(2, 1, 2, 2),
                              y_i, y_i.roll(1, 0), coeff=0.7)
        assert not y_mix.requires_grad

    def test_invalid_alpha_rejected(self):
        with pytest.raises(ConfigurationError):
            MixupConfig(alpha=0.0)

    def test_batch_partner_is_roll_by_one(self):
        x = torch.arange(12.0).reshape(3, 1, 2, 2)
        y = rand_probs(3, 4, seed=8)
        rng = np.random.default_rng(0)
        x_mix, y_mix, coeff = mixup_batch(x, y, rng, alpha=1.0)
        expected_x = coeff * x + (1 - coeff) * torch.roll(x, 1, dims=0)
        assert torch.allclose(x_mix, expected_x)
        assert torch.allclose(y_mix, coeff * y + (1 - coeff) * torch.roll(y, 1, 0))


class TestLossMixup:
    def test_consistent_model_gives_entropy_floor(self):
        y = rand_probs(4, 5, seed=1)
        entropy = -(y * y.log()).sum(dim=1).mean()
        assert loss_mixup(y, y).item() == pytest.approx(entropy.item(), abs=1e-6)

    def test_uniform_prediction_gives_log_c(self):
        y_mix = rand_probs(4, 8, seed=2)
        uniform = torch.full((4, 8), 1 / 8)
        assert loss_mixup(y_mix, uniform).item() == pytest.approx(math.log(8), abs=1e-6)

    def test_float64_oracle(self):
        y_mix = rand_probs(16, 6, seed=3, dtype=torch.float64)
        pred = rand_probs(16, 6, seed=4, dtype=torch.float64)
        expected = -(y_mix.numpy() * np.log(np.maximum(pred.numpy(), 1e-12))).sum(1).mean()
        assert loss_mixup(y_mix, pred).item() == pytest.approx(expected, abs=1e-10)


class TestLossFdc:
    def test_recomposes_from_single_and_mixup(self):
        model = LinearProbModel(3 * 4 * 4, 5, seed=0)
        x = torch.rand(6, 3, 4, 4)
        combined = rand_probs(6, 5, seed=1)
        whole = model.predict_whole_from(x)
        total, parts = loss_fdc(model, x, combined, whole,
                                np.random.default_rng(7), alpha=1.0)

        # independent recomposition with an identically seeded draw
        rng = np.random.default_rng(7)
        single = loss_single(combined, whole)
        x_mix, y_mix, _ = mixup_batch(x, combined.detach(), rng, alpha=1.0)
        mix = loss_mixup(y_mix, model.predict_whole_from(x_mix))
        assert total.item() == pytest.approx((single + mix).item(), abs=1e-9)
        assert parts["single"] == pytest.approx(single.item(), abs=1e-9)
        assert parts["mixup"] == pytest.approx(mix.item(), abs=1e-9)

    def test_disabled_mixup_reduces_to_single_term(self):
        model = LinearProbModel(3 * 4 * 4, 5, seed=0)
        x = torch.rand(4, 3, 4, 4)
        combined = rand_probs(4, 5, seed=2)
        whole = model.predict_whole_from(x)
        total, parts = loss_fdc(model, x, combined, whole,
                                np.random.default_rng(0), enable_mixup=False)
        assert total.item() == pytest.approx(
            loss_single(combined, whole).item(), abs=1e-9)
        assert parts["mixup"] == 0.0

    def test_single_sample_batch_degrades_with_warning(self, caplog):
        model = LinearProbModel(3 * 4 * 4, 5, seed=0)
        x = torch.rand(1, 3, 4, 4)
        combined = rand_probs(1, 5, seed=3)
        whole = model.predict_whole_from(x)
        with caplog.at_level("WARNING"):
            total, parts = loss_fdc(model, x, combined, whole,
                                    np.random.default_rng(0))
        assert parts["mixup"] == 0.0
        assert any("size 1" in r.message for r in caplog.records)

    def test_gradient_matches_finite_differences_on_two_sample_model(self):
        """Full two-term consistency gradient versus central differences,
        with the detached anchors held fixed in the differenced function.
        The combined prediction comes from a second live model so it carries
        gradient, as in the adaptation graph."""
        model = LinearProbModel(3 * 3 * 3, 4, seed=1).double()
        branch = LinearProbModel(3 * 3 * 3, 4, seed=2).double()
        x = torch.rand(2, 3, 3, 3, dtype=torch.float64)
        params = list(model.parameters()) + list(branch.parameters())

        rng = np.random.default_rng(11)
        coeff = draw_mix_coeff(rng, 1.0)
        with torch.no_grad():
            frozen_mix_label = (coeff * branch.predict_whole_from(x)
                                + (1 - coeff) * branch.predict_whole_from(x).roll(1, 0))
        x_mix, _ = mixup_pair(x, torch.roll(x, 1, 0),
                              frozen_mix_label, frozen_mix_label, coeff)
        with torch.no_grad():
            frozen_anchor = model.predict_whole_from(x)

        def frozen_loss():
            combined = branch.predict_whole_from(x)
            return loss_single(combined, frozen_anchor) \
                + loss_mixup(frozen_mix_label, model.predict_whole_from(x_mix))

        analytic = analytic_grads(frozen_loss(), params)
        numeric = finite_diff_grads(frozen_loss, params)
        assert_grads_close(analytic, numeric, rtol=1e-3)
