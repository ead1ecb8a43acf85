import numpy as np
import pytest
import torch
from torch import nn

from dvst.data import SyntheticClips, shift_frame
from dvst.errors import ShapeMismatch
from dvst.model import DvstModel
from dvst.training import flow_pretrain
from dvst.transform import (CodewordContextNet, FeatureContextNet,
                            FlowEstimator, HyperDecoder, HyperEncoder, warp)


def brute_force_warp(feature, flow):
    b, c, h, w = feature.shape
    out = torch.zeros_like(feature)
    for bi in range(b):
        for y in range(h):
            for x in range(w):
                sx = min(max(x + float(flow[bi, 0, y, x]), 0.0), w - 1.0)
                sy = min(max(y + float(flow[bi, 1, y, x]), 0.0), h - 1.0)
                x0, y0 = int(np.floor(sx)), int(np.floor(sy))
                x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
                fx, fy = sx - x0, sy - y0
                for ci in range(c):
                    v00 = float(feature[bi, ci, y0, x0])
                    v10 = float(feature[bi, ci, y0, x1])
                    v01 = float(feature[bi, ci, y1, x0])
                    v11 = float(feature[bi, ci, y1, x1])
                    out[bi, ci, y, x] = (v00 * (1 - fx) * (1 - fy)
                                         + v10 * fx * (1 - fy)
                                         + v01 * (1 - fx) * fy
                                         + v11 * fx * fy)
    return out


class TestWarp:
    def test_zero_flow_identity(self):
        f = torch.rand(1, 3, 16, 16)
        out = warp(f, torch.zeros(1, 2, 16, 16))
        assert float((out - f).abs().max()) <= 1e-6

    def test_integer_shift_with_clamped_border(self):
        g = torch.arange(16.0).view(1, 1, 4, 4)
        flow = torch.zeros(1, 2, 4, 4)
        flow[:, 0] = -1.0
        out = warp(g, flow).squeeze()
        expected = torch.tensor([[0., 0., 1., 2.], [4., 4., 5., 6.],
                                 [8., 8., 9., 10.], [12., 12., 13., 14.]])
        assert torch.equal(out, expected)

    def test_matches_brute_force(self):
        torch.manual_seed(1)
        f = torch.rand(1, 3, 32, 32)
        flow = (torch.rand(1, 2, 32, 32) - 0.5) * 8
        assert float((warp(f, flow) - brute_force_warp(f, flow)).abs().max()) < 1e-5

    def test_constant_conservation_exact(self):
        const = torch.full((1, 4, 12, 12), 0.37)
        flow = (torch.rand(1, 2, 12, 12) - 0.5) * 30
        assert torch.equal(warp(const, flow), const)

    def test_differentiable_in_both_arguments(self):
        f = torch.rand(1, 2, 8, 8, requires_grad=True)
        flow = ((torch.rand(1, 2, 8, 8) - 0.5) * 3).requires_grad_(True)
        warp(f, flow).sum().backward()
        assert torch.isfinite(f.grad).all() and torch.isfinite(flow.grad).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            warp(torch.zeros(1, 3, 8, 8), torch.zeros(1, 2, 4, 4))
        with pytest.raises(ShapeMismatch):
            warp(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))


class TestFlowEstimator:
    def test_untrained_deterministic(self):
        torch.manual_seed(3)
        net = FlowEstimator(width=16)
        a = torch.rand(1, 3, 64, 64)
        b = torch.rand(1, 3, 64, 64)
        assert torch.equal(net.estimate_flow(a, b), net.estimate_flow(a, b))

    def test_shape_mismatch(self):
        net = FlowEstimator(width=8)
        with pytest.raises(ShapeMismatch):
            net.estimate_flow(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 32, 32))

    def test_learns_synthetic_shifts(self, cfg):
        torch.manual_seed(0)
        model = DvstModel(cfg)
        ds = SyntheticClips(16, length=2, size=64, seed=5)
        flow_pretrain(model, ds, steps=900, cfg=cfg, seed=11, batch=2)
        net = model.flow_net
        with torch.no_grad():
            x_ref = ds.clip_tensor(3)[:1]
            zero = net.estimate_flow(x_ref, x_ref)
            assert float(zero.abs().mean()) < 0.5
            x_t = shift_frame(x_ref, 2, 0)
            flow = net.estimate_flow(x_t, x_ref)
            assert float(flow[:, 0].mean()) == pytest.approx(-2.0, abs=0.5)
            assert float(flow[:, 1].abs().mean()) < 0.5


class TestTransforms:
    def test_analysis_output_is_input_over_32(self, model):
        x = torch.rand(1, 3, 64, 96)
        ctx = torch.zeros(1, model.ctx_channels, 64, 96)
        y = model.analysis(x, ctx)
        assert tuple(y.shape) == (1, model.m_dim, 2, 3)

    def test_analysis_sensitivity(self, model):
        ctx = torch.zeros(1, model.ctx_channels, 64, 64)
        a = model.analysis(torch.rand(1, 3, 64, 64), ctx)
        b = model.analysis(torch.rand(1, 3, 64, 64), ctx)
        assert float((a - b).norm()) > 0

    def test_analysis_deterministic(self, model):
        x = torch.rand(1, 3, 64, 64)
        ctx = torch.zeros(1, model.ctx_channels, 64, 64)
        assert torch.equal(model.analysis(x, ctx), model.analysis(x, ctx))

    def test_synthesis_shape_and_range(self, model):
        y = torch.randn(1, model.m_dim, 2, 2)
        ctx = torch.zeros(1, model.ctx_channels, 64, 64)
        x = model.synthesis(y, ctx)
        assert tuple(x.shape) == (1, 3, 64, 64)
        assert float(x.min()) >= 0.0 and float(x.max()) <= 1.0

    def test_context_shape_mismatch(self, model):
        with pytest.raises(ShapeMismatch):
            model.analysis(torch.rand(1, 3, 64, 64),
                           torch.zeros(1, model.ctx_channels, 32, 32))

    def test_motion_transforms_shapes(self, model):
        m = torch.randn(1, 2, 64, 64)
        y_mv = model.mv_analysis(m)
        assert tuple(y_mv.shape) == (1, model.m_dim, 2, 2)
        m_hat = model.mv_synthesis(y_mv)
        assert tuple(m_hat.shape) == (1, 2, 64, 64)

    def test_motion_deterministic(self, model):
        m = torch.randn(1, 2, 64, 64)
        assert torch.equal(model.mv_analysis(m), model.mv_analysis(m))


class TestHyperTransforms:
    def test_spatial_quarter_contract(self):
        torch.manual_seed(0)
        enc = HyperEncoder(8, 4)
        y = torch.randn(1, 8, 8, 8)
        z = enc(y)
        assert tuple(z.shape[-2:]) == (2, 2)

    def test_degenerate_grid_floors_at_one(self):
        enc = HyperEncoder(8, 4)
        z = enc(torch.randn(1, 8, 2, 2))
        assert tuple(z.shape[-2:]) == (1, 1)

    def test_decoder_matches_latent_grid(self):
        torch.manual_seed(0)
        dec = HyperDecoder(4, 16)
        for hw in [(2, 2), (4, 6), (3, 5)]:
            z = torch.randn(1, 4, max(hw[0] // 4, 1), max(hw[1] // 4, 1))
            out = dec(z, hw)
            assert tuple(out.shape[-2:]) == hw

    def test_hier_prior_sensitive_to_hyperprior(self):
        torch.manual_seed(1)
        dec = HyperDecoder(4, 16)
        z = torch.randn(1, 4, 1, 1)
        a = dec(z, (2, 2))
        b = dec(z + 0.5, (2, 2))
        assert float((a - b).norm()) > 0


class TestContexts:
    def test_tx_rx_share_weights_bit_exact(self, model):
        x_ref = torch.rand(1, 3, 64, 64)
        y_ref = torch.randn(1, model.m_dim, 2, 2)
        motion = torch.randn(1, 2, 64, 64)
        f1, c1 = model.contexts_from(x_ref, y_ref, motion)
        f2, c2 = model.contexts_from(x_ref, y_ref, motion)
        assert torch.equal(f1, f2) and torch.equal(c1, c2)

    def test_identity_stubs_zero_flow(self):
        net = FeatureContextNet(3)
        net.extract = nn.Identity()
        net.refine = nn.Identity()
        x_ref = torch.rand(1, 3, 32, 32)
        ctx = net.make_feature_context(x_ref, torch.zeros(1, 2, 32, 32))
        assert float((ctx - x_ref).abs().max()) <= 1e-6

    def test_feature_context_depends_on_reference(self, model):
        motion = torch.zeros(1, 2, 64, 64)
        a = model.ctx_feature.make_feature_context(torch.rand(1, 3, 64, 64), motion)
        b = model.ctx_feature.make_feature_context(torch.rand(1, 3, 64, 64), motion)
        assert float((a - b).norm()) > 0

    def test_codeword_zero_flow_identity_on_precoded(self):
        net = CodewordContextNet(4)
        net.refine = nn.Identity()
        y_ref = torch.randn(1, 4, 2, 2)
        out = net.make_codeword_context(y_ref, torch.zeros(1, 2, 64, 64))
        pre = net.precode(y_ref)
        assert float((out - pre).abs().max()) <= 1e-6

    def test_constant_32px_flow_is_two_positions_on_stride16_grid(self):
        net = CodewordContextNet(1)
        net.precode = nn.Identity()
        net.refine = nn.Identity()
        y_ref = torch.arange(16.0).view(1, 1, 4, 4)
        motion = torch.zeros(1, 2, 64, 64)
        motion[:, 0] = 32.0  # pixel-scale horizontal displacement
        out = net.make_codeword_context(y_ref, motion)
        flow_grid = torch.full((1, 2, 4, 4), 0.0)
        flow_grid[:, 0] = 2.0
        assert torch.equal(out, warp(y_ref, flow_grid))

    def test_resolution_mismatch(self):
        net = CodewordContextNet(2)
        with pytest.raises(ShapeMismatch):
            net.make_codeword_context(torch.randn(1, 2, 3, 3),
                                      torch.zeros(1, 2, 64, 64))

    def test_temporal_prior_shape(self, model):
        ctx = torch.rand(1, model.ctx_channels, 64, 64)
        out = model.temporal_prior(ctx)
        assert tuple(out.shape) == (1, model.m_dim, 2, 2)


class TestEndToEndGradient:
    def test_loss_gradient_exists_through_full_stack(self, model, cfg):
        x = torch.rand(1, 3, 64, 64, requires_grad=True)
        ctx = torch.zeros(1, model.ctx_channels, 64, 64)
        y = model.analysis(x, ctx)
        x_hat = model.synthesis(y, ctx)
        loss = ((x_hat - x) ** 2).mean()
        loss.backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()
        assert float(x.grad.abs().sum()) > 0
