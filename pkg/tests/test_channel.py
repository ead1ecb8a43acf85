import math

import pytest
import torch
from scipy import stats

from dvst.channel import (ChannelConfig, SymbolStream, measure_snr,
                          power_normalize, transmit)
from dvst.errors import OddLengthStream, ShapeMismatch, ZeroPower


def stream_of(values):
    values = torch.as_tensor(values, dtype=torch.float32)
    return SymbolStream(values, torch.tensor([values.numel()]))


class TestSymbolStream:
    def test_length_invariant(self):
        with pytest.raises(ShapeMismatch):
            SymbolStream(torch.zeros(5), torch.tensor([2, 2]))

    def test_segment_accounting(self):
        s = SymbolStream(torch.zeros(6), torch.tensor([2, 0, 4]))
        assert len(s) == 6


class TestPowerNormalize:
    def test_constant_two_becomes_one(self):
        out = power_normalize(stream_of([2.0] * 16))
        assert torch.allclose(out.values, torch.ones(16))
        assert float(out.norm_scale) == pytest.approx(2.0)

    def test_idempotent_on_unit_power(self):
        torch.manual_seed(0)
        v = torch.randn(4096)
        v = v / v.pow(2).mean().sqrt()
        out = power_normalize(stream_of(v))
        assert torch.allclose(out.values, v, atol=1e-6)

    def test_unit_mean_square(self):
        torch.manual_seed(1)
        out = power_normalize(stream_of(torch.randn(10_000) * 3.7))
        assert float(out.values.pow(2).mean()) == pytest.approx(1.0, abs=1e-6)

    def test_zero_power(self):
        with pytest.raises(ZeroPower):
            power_normalize(stream_of([0.0] * 8))
        with pytest.raises(ZeroPower):
            power_normalize(SymbolStream(torch.zeros(0), torch.tensor([0])))


class TestTransmit:
    def test_noiseless_sentinel_exact(self):
        s = power_normalize(stream_of(torch.randn(100)))
        out = transmit(s, ChannelConfig("awgn", math.inf))
        assert torch.equal(out.values, s.values)

    def test_awgn_noise_variance_at_10db(self):
        cfg = ChannelConfig("awgn", 10.0)
        assert cfg.noise_variance() == pytest.approx(0.1)

    def test_awgn_empirical_snr(self):
        torch.manual_seed(3)
        s = power_normalize(stream_of(torch.randn(10 ** 6)))
        for snr in (0.0, 10.0):
            out = transmit(s, ChannelConfig("awgn", snr))
            assert measure_snr(s.values, out.values) == pytest.approx(snr, abs=0.1)

    def test_seeded_reproducibility(self):
        s = power_normalize(stream_of(torch.randn(512)))
        a = transmit(s, ChannelConfig("awgn", 5.0, seed=11))
        b = transmit(s, ChannelConfig("awgn", 5.0, seed=11))
        assert torch.equal(a.values, b.values)

    def test_noise_signal_independence(self):
        torch.manual_seed(4)
        s = power_normalize(stream_of(torch.randn(10 ** 6)))
        out = transmit(s, ChannelConfig("awgn", 0.0))
        noise = (out.values - s.values).double()
        corr = float((s.values.double() * noise).mean()
                     / (s.values.double().std() * noise.std()))
        assert abs(corr) < 0.01

    def test_identity_gradient_autograd(self):
        v = torch.randn(64, requires_grad=True)
        out = transmit(SymbolStream(v, torch.tensor([64])),
                       ChannelConfig("awgn", 3.0, seed=5))
        out.values.sum().backward()
        assert torch.equal(v.grad, torch.ones(64))

    def test_identity_gradient_finite_difference(self):
        torch.manual_seed(6)
        v = torch.randn(32, dtype=torch.float64)
        direction = torch.randn(32, dtype=torch.float64)
        eps = 1e-3
        cfg = ChannelConfig("awgn", 0.0, seed=21)
        hi = transmit(SymbolStream(v + eps * direction, torch.tensor([32])), cfg)
        lo = transmit(SymbolStream(v - eps * direction, torch.tensor([32])), cfg)
        fd = (hi.values - lo.values) / (2 * eps)
        assert torch.allclose(fd, direction, atol=1e-5)

    def test_rayleigh_requires_even_length(self):
        s = power_normalize(stream_of(torch.randn(33)))
        with pytest.raises(OddLengthStream):
            transmit(s, ChannelConfig("rayleigh_equalized", 10.0))

    def test_rayleigh_heavier_tails_than_awgn(self):
        torch.manual_seed(8)
        s = power_normalize(stream_of(torch.randn(10 ** 6)))
        ray = transmit(s, ChannelConfig("rayleigh_equalized", 10.0))
        awgn = transmit(s, ChannelConfig("awgn", 10.0))
        k_ray = stats.kurtosis((ray.values - s.values).numpy())
        k_awgn = stats.kurtosis((awgn.values - s.values).numpy())
        assert k_ray > 0.0
        assert k_ray > k_awgn

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ChannelConfig("qam", 10.0)


class TestMeasureSnr:
    def test_identical_returns_inf(self):
        v = torch.randn(10)
        assert measure_snr(v, v) == math.inf

    def test_exact_tenth_noise_power(self):
        s = torch.ones(10)
        noisy = s.clone()
        noisy[0] += 1.0  # error power 1, signal power 10
        assert measure_snr(s, noisy) == pytest.approx(10.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            measure_snr(torch.zeros(3), torch.zeros(4))
