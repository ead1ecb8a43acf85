import math

import pytest
import torch

from dvst.channel import ChannelConfig, transmit
from dvst.errors import CorruptStream, InvalidEta, UnknownRate
from dvst.jscc import (JsccDecoder, JsccEncoder, RateTokens, ValueSet,
                       account_cbr, allocate, cbr_components, quantize_rate,
                       side_info_bits, side_info_symbols)

TOY_PL = ValueSet((0, 2, 4, 6, 8, 12, 16, 24))
TOY_ML = ValueSet((0, 1, 2, 4))
PAPER_PL = ValueSet((0, 2, 4, 6, 8, 10, 15, 20, 26, 32, 40, 48, 56, 64, 80, 96))
PAPER_ML = ValueSet((0, 1, 2, 4, 8, 16, 32, 48))


class TestValueSet:
    def test_must_contain_zero(self):
        with pytest.raises(ValueError):
            ValueSet((1, 2))

    def test_must_be_sorted(self):
        with pytest.raises(ValueError):
            ValueSet((0, 4, 2, 8))

    def test_size_power_of_two(self):
        with pytest.raises(ValueError):
            ValueSet((0, 1, 2))

    def test_paper_side_bits_total_seven(self):
        assert PAPER_PL.bits_per_embedding == 4
        assert PAPER_ML.bits_per_embedding == 3

    def test_index_of_rejects_foreign_values(self):
        with pytest.raises(UnknownRate):
            TOY_PL.index_of(torch.tensor([3.0]))


class TestAllocate:
    def test_multiplication(self):
        k = allocate(torch.tensor([4.0]), 0.5)
        assert float(k) == pytest.approx(2.0)

    def test_zero_entropy_zero_cost(self):
        assert float(allocate(torch.tensor([0.0]), 0.7)) == 0.0

    def test_doubling_eta_doubles_cost(self):
        r = torch.rand(10) * 30
        assert torch.allclose(allocate(r, 0.6), 2 * allocate(r, 0.3))

    def test_invalid_eta(self):
        for eta in (0.0, -1.0):
            with pytest.raises(InvalidEta):
                allocate(torch.tensor([1.0]), eta)


class TestQuantizeRate:
    def test_nearest(self):
        assert float(quantize_rate(torch.tensor(5.2), PAPER_PL)) == 6.0

    def test_tie_resolves_upward(self):
        assert float(quantize_rate(torch.tensor(5.0), PAPER_PL)) == 6.0
        assert float(quantize_rate(torch.tensor(1.0), TOY_PL)) == 2.0

    def test_clamp_to_max(self):
        assert float(quantize_rate(torch.tensor(200.0), PAPER_PL)) == 96.0

    def test_members_are_fixed_points(self):
        for v in TOY_PL.values:
            assert float(quantize_rate(torch.tensor(float(v)), TOY_PL)) == v

    def test_monotone_in_eta(self):
        r = torch.linspace(0, 40, 401)
        lo = quantize_rate(allocate(r, 0.3), TOY_PL)
        hi = quantize_rate(allocate(r, 0.6), TOY_PL)
        assert bool((hi >= lo).all())

    def test_straight_through_gradient(self):
        k = torch.tensor([3.3, 7.7], requires_grad=True)
        out = quantize_rate(k, TOY_PL, ste=True)
        assert out.detach().tolist() == [4.0, 8.0]
        out.sum().backward()
        assert torch.equal(k.grad, torch.ones(2))


def make_codec(vset=TOY_PL, m=16, ctx=True):
    torch.manual_seed(3)
    enc = JsccEncoder(m, vset, blocks=2, heads=4, window=4, with_context=ctx)
    dec = JsccDecoder(m, vset, blocks=2, heads=4, window=4, with_context=ctx)
    tokens = RateTokens(vset, m)
    return enc, dec, tokens


class TestEncodeDecode:
    def test_all_zero_costs_give_empty_stream(self):
        enc, dec, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        ctx = torch.randn(1, 16, 2, 2)
        stream = enc.encode(y, ctx, torch.zeros(2, 2), tok)
        assert len(stream) == 0
        assert stream.segment_lengths.tolist() == [0, 0, 0, 0]
        y_hat = dec.decode(stream, ctx, torch.zeros(2, 2), tok)
        assert tuple(y_hat.shape) == (1, 16, 2, 2)
        assert torch.isfinite(y_hat).all()

    def test_segment_accounting(self):
        enc, _, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        ctx = torch.randn(1, 16, 2, 2)
        k_bar = torch.tensor([[2.0, 6.0], [0.0, 4.0]])
        stream = enc.encode(y, ctx, k_bar, tok)
        assert len(stream) == 12
        assert stream.segment_lengths.tolist() == [2, 6, 0, 4]

    def test_deterministic(self):
        enc, _, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        ctx = torch.randn(1, 16, 2, 2)
        k_bar = torch.full((2, 2), 4.0)
        a = enc.encode(y, ctx, k_bar, tok)
        b = enc.encode(y, ctx, k_bar, tok)
        assert torch.equal(a.values, b.values)

    def test_unknown_rate_rejected(self):
        enc, _, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        with pytest.raises(UnknownRate):
            enc.encode(y, torch.randn(1, 16, 2, 2),
                       torch.full((2, 2), 3.0), tok)

    def test_power_normalized_output(self):
        enc, _, tok = make_codec()
        stream = enc.encode(torch.randn(1, 16, 2, 2) * 10,
                            torch.randn(1, 16, 2, 2),
                            torch.full((2, 2), 8.0), tok)
        assert float(stream.values.pow(2).mean()) == pytest.approx(1.0, abs=1e-5)

    @pytest.mark.parametrize("vset,ctx", [(TOY_PL, True), (TOY_ML, False),
                                          (PAPER_PL, True), (PAPER_ML, False)])
    def test_head_group_consistency_exhaustive(self, vset, ctx):
        enc, dec, tok = make_codec(vset=vset, ctx=ctx)
        y = torch.randn(1, 16, 2, 2)
        cw = torch.randn(1, 16, 2, 2) if ctx else None
        for v in vset.values:
            k_bar = torch.full((2, 2), float(v))
            stream = enc.encode(y, cw, k_bar, tok)
            assert len(stream) == 4 * v
            y_hat = dec.decode(stream, cw, k_bar, tok)
            assert tuple(y_hat.shape) == (1, 16, 2, 2)

    def test_mixed_grid_round_trip(self):
        enc, dec, tok = make_codec()
        torch.manual_seed(0)
        for _ in range(25):
            k_idx = torch.randint(0, len(TOY_PL), (3, 3))
            k_bar = torch.tensor(TOY_PL.values, dtype=torch.float32)[k_idx]
            y = torch.randn(1, 16, 3, 3)
            ctx = torch.randn(1, 16, 3, 3)
            stream = enc.encode(y, ctx, k_bar, tok)
            assert len(stream) == int(k_bar.sum())
            assert torch.equal(stream.segment_lengths.reshape(3, 3),
                               k_bar.long())
            y_hat = dec.decode(stream, ctx, k_bar, tok)
            assert torch.isfinite(y_hat).all()

    def test_corrupt_stream_rejected(self):
        enc, dec, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        ctx = torch.randn(1, 16, 2, 2)
        k_bar = torch.full((2, 2), 4.0)
        stream = enc.encode(y, ctx, k_bar, tok)
        with pytest.raises(CorruptStream):
            dec.decode(stream, ctx, torch.full((2, 2), 2.0), tok)

    def test_rate_tokens_are_live(self):
        enc, _, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        ctx = torch.randn(1, 16, 2, 2)
        k_bar = torch.tensor([[2.0, 4.0], [2.0, 4.0]])
        before = enc.encode(y, ctx, k_bar, tok).values
        with torch.no_grad():
            i, j = TOY_PL.values.index(2), TOY_PL.values.index(4)
            tmp = tok.tokens[i].clone()
            tok.tokens[i] = tok.tokens[j]
            tok.tokens[j] = tmp
        after = enc.encode(y, ctx, k_bar, tok).values
        assert float((after - before).abs().max()) > 0

    def test_survives_channel_round_trip(self):
        enc, dec, tok = make_codec()
        y = torch.randn(1, 16, 2, 2)
        ctx = torch.randn(1, 16, 2, 2)
        k_bar = torch.tensor([[2.0, 6.0], [4.0, 8.0]])
        stream = enc.encode(y, ctx, k_bar, tok)
        received = transmit(stream, ChannelConfig("awgn", 10.0, seed=4))
        y_hat = dec.decode(received, ctx, k_bar, tok)
        assert torch.isfinite(y_hat).all()


class TestCbrAccounting:
    def test_spec_example(self):
        k = torch.full((4,), 2.0)
        cbr = account_cbr(k, None, 0, 3 * 64 * 64, 10.0, include_side=False)
        assert cbr == pytest.approx(8 / 12288, abs=1e-15)

    def test_components_recompose_exactly(self):
        torch.manual_seed(1)
        for _ in range(50):
            k_pl = torch.tensor(TOY_PL.values, dtype=torch.float32)[
                torch.randint(0, len(TOY_PL), (4,))]
            k_ml = torch.tensor(TOY_ML.values, dtype=torch.float32)[
                torch.randint(0, len(TOY_ML), (4,))]
            side = side_info_bits(4, TOY_PL) + side_info_bits(4, TOY_ML)
            parts = cbr_components(k_pl, k_ml, side, 12288, 10.0)
            total = account_cbr(k_pl, k_ml, side, 12288, 10.0)
            assert parts[0] + parts[1] + parts[2] == total

    def test_side_bits_scale_with_embeddings(self):
        assert side_info_bits(4, TOY_PL) == 4 * 3
        assert side_info_bits(4, TOY_ML) == 4 * 2

    def test_side_symbols_use_gaussian_capacity(self):
        bits = 20.0
        assert side_info_symbols(bits, 10.0) == pytest.approx(
            bits / math.log2(1 + 10.0))
        assert side_info_symbols(bits, math.inf) == 0.0

    def test_include_side_flag(self):
        k = torch.full((4,), 2.0)
        with_side = account_cbr(k, None, 12, 12288, 10.0, include_side=True)
        without = account_cbr(k, None, 12, 12288, 10.0, include_side=False)
        assert with_side > without
