import math

import numpy as np
import pytest
import torch

from dvst.errors import (FrameTooSmall, InvalidGopSize, NoFrames,
                         ShapeMismatch)
from dvst.video_io import (Frame, Gop, load_sequence, ms_ssim, ms_ssim_db,
                           msssim_scales, partition_gops, psnr,
                           similarity_to_db)

from conftest import write_png_dir


def _rand_frames(rng, n, h=64, w=64):
    return [rng.random((h, w, 3)).astype(np.float32) for _ in range(n)]


class TestLoadSequence:
    def test_identity_passthrough(self, tmp_path, rng):
        d = write_png_dir(tmp_path / "seq", _rand_frames(rng, 7, 256, 256))
        frames = load_sequence(d)
        assert len(frames) == 7
        assert all(f.height == 256 and f.width == 256 for f in frames)

    def test_pads_to_multiple_of_32_by_edge_replication(self, tmp_path, rng):
        arr = rng.random((250, 250, 3)).astype(np.float32)
        d = write_png_dir(tmp_path / "seq", [arr])
        frame = load_sequence(d)[0]
        assert (frame.height, frame.width) == (256, 256)
        assert frame.content_hw == (250, 250)
        # padded rows repeat the last content row
        np.testing.assert_array_equal(frame.pixels[250], frame.pixels[249])
        np.testing.assert_array_equal(frame.pixels[:, 250], frame.pixels[:, 249])

    def test_max_frames_truncates(self, tmp_path, rng):
        d = write_png_dir(tmp_path / "seq", _rand_frames(rng, 10))
        assert len(load_sequence(d, max_frames=4)) == 4

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(NoFrames):
            load_sequence(tmp_path / "empty")

    def test_inconsistent_dimensions(self, tmp_path, rng):
        d = write_png_dir(tmp_path / "seq", _rand_frames(rng, 2, 64, 64))
        write_png_dir(d, _rand_frames(rng, 1, 96, 64), prefix="zz")
        with pytest.raises(ShapeMismatch):
            load_sequence(d)

    def test_center_crop(self, tmp_path, rng):
        d = write_png_dir(tmp_path / "seq", _rand_frames(rng, 2, 128, 128))
        frames = load_sequence(d, crop_size=64)
        assert all((f.height, f.width) == (64, 64) for f in frames)

    def test_lexicographic_order(self, tmp_path):
        flat = [np.full((32, 32, 3), v, dtype=np.float32) for v in (0.2, 0.8)]
        d = write_png_dir(tmp_path / "seq", flat)
        frames = load_sequence(d)
        assert frames[0].pixels.mean() < frames[1].pixels.mean()


class TestFrame:
    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            Frame(np.full((32, 32, 3), 1.5, dtype=np.float32))

    def test_rejects_indivisible_dims(self):
        with pytest.raises(ShapeMismatch):
            Frame(np.zeros((33, 32, 3), dtype=np.float32))

    def test_tensor_round_trip(self, rng):
        f = Frame(rng.random((32, 64, 3)).astype(np.float32))
        g = Frame.from_tensor(f.to_tensor())
        np.testing.assert_allclose(f.pixels, g.pixels, atol=1e-7)


class TestPartitionGops:
    def test_even_split(self, rng):
        frames = [Frame(p) for p in _rand_frames(rng, 8)]
        gops = partition_gops(frames, 4)
        assert [len(g) for g in gops] == [4, 4]

    def test_single_gop_of_seven(self, rng):
        frames = [Frame(p) for p in _rand_frames(rng, 7)]
        assert [len(g) for g in partition_gops(frames, 7)] == [7]

    def test_trailing_remainder(self, rng):
        frames = [Frame(p) for p in _rand_frames(rng, 5)]
        assert [len(g) for g in partition_gops(frames, 4)] == [4, 1]

    def test_concatenation_reproduces_input(self, rng):
        frames = [Frame(p) for p in _rand_frames(rng, 9)]
        gops = partition_gops(frames, 4)
        flat = [f for g in gops for f in g.frames]
        assert flat == frames

    def test_invalid_size(self, rng):
        with pytest.raises(InvalidGopSize):
            partition_gops([Frame(_rand_frames(rng, 1)[0])], 0)

    def test_iframe_index_zero(self, rng):
        gop = Gop(frames=[Frame(p) for p in _rand_frames(rng, 3)])
        assert gop.i_frame_index == 0


class TestPsnr:
    def test_identical_hits_cap(self, rng):
        f = Frame(_rand_frames(rng, 1)[0])
        assert psnr(f, f) == 100.0

    def test_zeros_vs_ones(self):
        a = Frame(np.zeros((32, 32, 3), dtype=np.float32))
        b = Frame(np.ones((32, 32, 3), dtype=np.float32))
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-9)

    def test_formula_oracle(self, rng):
        a, b = (Frame(p) for p in _rand_frames(rng, 2))
        mse = np.mean((a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) ** 2)
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-6)

    def test_symmetry_exact(self, rng):
        a, b = (Frame(p) for p in _rand_frames(rng, 2))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self, rng):
        a = Frame(_rand_frames(rng, 1, 32, 32)[0])
        b = Frame(_rand_frames(rng, 1, 64, 64)[0])
        with pytest.raises(ShapeMismatch):
            psnr(a, b)


class TestMsSsim:
    def test_db_formula(self):
        assert similarity_to_db(0.9) == pytest.approx(10.0, abs=1e-9)
        assert similarity_to_db(0.99) == pytest.approx(20.0, abs=1e-9)

    def test_identical_frames_capped(self, rng):
        f = Frame(_rand_frames(rng, 1)[0])
        assert ms_ssim_db(f, f) == 100.0

    def test_self_similarity_is_one(self, rng):
        x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
        assert float(ms_ssim(x, x)) == pytest.approx(1.0, abs=1e-6)

    def test_scale_count(self):
        assert msssim_scales(64, 64) == 3
        assert msssim_scales(161, 161) == 5
        assert msssim_scales(160, 160) == 4

    def test_too_small(self):
        with pytest.raises(FrameTooSmall):
            ms_ssim(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))

    def test_differentiable(self):
        x = torch.rand(1, 3, 64, 64, requires_grad=True)
        y = torch.rand(1, 3, 64, 64)
        ms_ssim(x, y).backward()
        assert torch.isfinite(x.grad).all()

    def test_degradation_orders_quality(self, rng):
        base = _rand_frames(rng, 1)[0] * 0.5 + 0.25
        a = Frame(base)
        small = Frame(np.clip(base + rng.normal(0, 0.01, base.shape), 0, 1).astype(np.float32))
        big = Frame(np.clip(base + rng.normal(0, 0.1, base.shape), 0, 1).astype(np.float32))
        assert ms_ssim_db(a, small) > ms_ssim_db(a, big)
