import numpy as np
import pytest
import torch

from dcfs.disentangle import CoordinateGate, FeatureDisentangler
from dcfs.errors import ConfigurationError, NumericError
from helpers import analytic_grads, assert_grads_close, finite_diff_grads


def numpy_coordinate_gate(x, reduce_w, reduce_b, eh_w, eh_b, ew_w, ew_b):
    """Independent straight-line recomputation of the gate: directional
    average pooling, shared 1x1 bottleneck + ReLU, two sigmoid branches,
    broadcast product."""
    b, c, h, w = x.shape
    pooled_h = x.mean(axis=3)                        # [B,C,H]
    pooled_w = x.mean(axis=2)                        # [B,C,W]
    joint = np.concatenate([pooled_h, pooled_w], axis=2)  # [B,C,H+W]
    mid = np.einsum("oc,bcl->bol", reduce_w, joint) + reduce_b[None, :, None]
    mid = np.maximum(mid, 0.0)
    part_h, part_w = mid[:, :, :h], mid[:, :, h:]
    gate_h = 1.0 / (1.0 + np.exp(-(np.einsum("oc,bcl->bol", eh_w, part_h)
                                   + eh_b[None, :, None])))  # [B,C,H]
    gate_w = 1.0 / (1.0 + np.exp(-(np.einsum("oc,bcl->bol", ew_w, part_w)
                                   + ew_b[None, :, None])))  # [B,C,W]
    return gate_h[:, :, :, None] * gate_w[:, :, None, :]


def randomized_gate(channels=8, reduction=2, seed=0) -> CoordinateGate:
    gate = CoordinateGate(channels, reduction)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in gate.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
    return gate


class TestCoordinateGate:
    def test_zero_initialized_gate_is_one_quarter(self):
        gate = CoordinateGate(16, reduction=4)
        x = torch.randn(3, 16, 5, 7)
        out = gate(x)
        assert torch.allclose(out, torch.full_like(out, 0.25))

    def test_entries_strictly_inside_unit_interval(self):
        gate = randomized_gate(seed=1)
        out = gate(torch.randn(4, 8, 6, 6) * 3)
        assert (out > 0).all() and (out < 1).all()

    def test_output_shape_matches_input(self):
        gate = randomized_gate()
        x = torch.randn(2, 8, 5, 9)
        assert gate(x).shape == x.shape

    def test_matches_numpy_reimplementation(self):
        gate = randomized_gate(seed=2)
        x = torch.randn(4, 8, 6, 5, dtype=torch.float64)
        gate.double()
        expected = numpy_coordinate_gate(
            x.numpy(),
            gate.reduce.weight.detach().numpy()[:, :, 0, 0],
            gate.reduce.bias.detach().numpy(),
            gate.expand_h.weight.detach().numpy()[:, :, 0, 0],
            gate.expand_h.bias.detach().numpy(),
            gate.expand_w.weight.detach().numpy()[:, :, 0, 0],
            gate.expand_w.bias.detach().numpy(),
        )
        np.testing.assert_allclose(gate(x).detach().numpy(), expected, atol=1e-6)

    def test_channels_below_reduction_rejected(self):
        with pytest.raises(ConfigurationError):
            CoordinateGate(4, reduction=8)

    def test_channel_mismatch_rejected(self):
        gate = CoordinateGate(8, reduction=2)
        with pytest.raises(ConfigurationError):
            gate(torch.randn(1, 6, 4, 4))


class TestDisentangle:
    def test_forced_half_gate_splits_evenly(self, monkeypatch):
        dis = FeatureDisentangler(8, reduction=2)
        monkeypatch.setattr(dis.gate, "forward",
                            lambda fm: torch.full_like(fm, 0.5))
        f = torch.randn(2, 8, 4, 4)
        bundle = dis.disentangle(f)
        assert torch.allclose(bundle.semantic, 0.5 * f)
        assert torch.allclose(bundle.domain, 0.5 * f)

    def test_saturated_gate_gives_whole_to_semantic(self):
        dis = FeatureDisentangler(8, reduction=2)
        with torch.no_grad():
            dis.gate.expand_h.bias.fill_(30.0)
            dis.gate.expand_w.bias.fill_(30.0)
        f = torch.randn(2, 8, 4, 4)
        bundle = dis.disentangle(f)
        assert torch.allclose(bundle.semantic, f, atol=1e-6)
        assert torch.allclose(bundle.domain, torch.zeros_like(f), atol=1e-6)

    def test_parts_reconstruct_whole(self):
        dis = FeatureDisentangler(8, reduction=2)
        gen = torch.Generator().manual_seed(4)
        with torch.no_grad():
            for _ in range(20):
                f = torch.randn(3, 8, 5, 5, generator=gen) * 10
                bundle = dis.disentangle(f)
                err = (bundle.semantic + bundle.domain - f).abs().max()
                assert float(err) <= 1e-6 * float(f.abs().max())

    def test_batch_permutation_equivariance(self):
        dis = FeatureDisentangler(8, reduction=2)
        f = torch.randn(6, 8, 4, 4)
        perm = torch.tensor([3, 1, 5, 0, 4, 2])
        b1 = dis.disentangle(f)
        b2 = dis.disentangle(f[perm])
        for field in ("whole", "gate", "semantic", "domain"):
            assert torch.allclose(getattr(b1, field)[perm], getattr(b2, field),
                                  atol=1e-6)

    def test_nonfinite_input_rejected(self):
        dis = FeatureDisentangler(8, reduction=2)
        f = torch.randn(1, 8, 4, 4)
        f[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            dis.disentangle(f)


class TestGateGradient:
    def test_semantic_sum_gradient_matches_finite_differences(self):
        gate = randomized_gate(channels=6, reduction=2, seed=5).double()
        f = torch.randn(2, 6, 4, 4, dtype=torch.float64)
        params = list(gate.parameters())

        def loss_fn():
            return (f * gate(f)).sum()

        analytic = analytic_grads(loss_fn(), params)
        numeric = finite_diff_grads(loss_fn, params)
        assert_grads_close(analytic, numeric, rtol=1e-3)
