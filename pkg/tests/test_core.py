import math

import numpy as np
import pytest
import torch

from onestep_vsr.core import (
    ContractViolation,
    Frame,
    FlowField,
    PixelMask,
    VideoClip,
    downsample_frame_area,
    load_clip,
    load_frame,
    psnr,
    resample_mask,
    save_clip,
    save_frame,
    upsample_frame,
    warp,
)

from conftest import rand_frame


def bilinear_oracle(pixels: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Scalar-loop bilinear warp with border clamping."""
    H, W, C = pixels.shape
    out = np.zeros_like(pixels)
    for y in range(H):
        for x in range(W):
            sx = min(max(x + flow[y, x, 0], 0.0), W - 1.0)
            sy = min(max(y + flow[y, x, 1], 0.0), H - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
            fx, fy = sx - x0, sy - y0
            for c in range(C):
                top = pixels[y0, x0, c] * (1 - fx) + pixels[y0, x1, c] * fx
                bot = pixels[y1, x0, c] * (1 - fx) + pixels[y1, x1, c] * fx
                out[y, x, c] = top * (1 - fy) + bot * fy
    return out


class TestFrameTypes:
    def test_frame_rejects_out_of_range(self):
        with pytest.raises(ContractViolation):
            Frame(torch.full((4, 4, 3), 1.5))

    def test_frame_rejects_nan(self):
        bad = torch.zeros(4, 4, 3)
        bad[0, 0, 0] = float("nan")
        with pytest.raises(ContractViolation):
            Frame(bad)

    def test_frame_rejects_bad_channels(self):
        with pytest.raises(ContractViolation):
            Frame(torch.zeros(4, 4, 2))

    def test_frame_rejects_negative_index(self):
        with pytest.raises(ContractViolation):
            Frame(torch.zeros(4, 4, 1), frame_index=-1)

    def test_clip_requires_consecutive_indices(self):
        f0 = Frame(torch.zeros(4, 4, 1), 0)
        f2 = Frame(torch.zeros(4, 4, 1), 2)
        with pytest.raises(ContractViolation):
            VideoClip((f0, f2))

    def test_clip_requires_matching_shapes(self):
        f0 = Frame(torch.zeros(4, 4, 1), 0)
        f1 = Frame(torch.zeros(8, 8, 1), 1)
        with pytest.raises(ContractViolation):
            VideoClip((f0, f1))

    def test_hard_mask_rejects_fractions(self):
        with pytest.raises(ContractViolation):
            PixelMask(torch.full((2, 2), 0.5), hard=True)

    def test_flow_rejects_nan(self):
        v = torch.zeros(2, 2, 2)
        v[0, 0, 0] = float("inf")
        with pytest.raises(ContractViolation):
            FlowField(v)


class TestWarp:
    def test_zero_flow_is_identity(self):
        rng = np.random.default_rng(0)
        frame = rand_frame(rng, 8, 8)
        flow = FlowField(torch.zeros(8, 8, 2, dtype=torch.float64))
        out = warp(frame, flow)
        assert torch.equal(out.pixels, frame.pixels)

    def test_horizontal_ramp_shift(self):
        # ramp r(x) = x / W shifted one pixel with a clamped right border
        W = 8
        ramp = torch.arange(W, dtype=torch.float64).view(1, W, 1).expand(8, W, 1) / W
        frame = Frame(ramp.clone())
        flow = FlowField(torch.stack(
            [torch.ones(8, W, dtype=torch.float64), torch.zeros(8, W, dtype=torch.float64)],
            dim=2,
        ))
        expected = torch.tensor(
            [[min(x + 1, W - 1) / W for x in range(W)]], dtype=torch.float64
        ).view(1, W, 1).expand(8, W, 1)
        out = warp(frame, flow)
        assert torch.allclose(out.pixels, expected, atol=1e-12)

    def test_single_pixel_clamps(self):
        frame = Frame(torch.full((1, 1, 3), 0.37, dtype=torch.float64))
        flow = FlowField(torch.tensor([[[250.0, -99.0]]], dtype=torch.float64))
        out = warp(frame, flow)
        assert torch.equal(out.pixels, frame.pixels)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        frame = rand_frame(rng, 8, 8, 3)
        flow_np = rng.uniform(-2.5, 2.5, size=(8, 8, 2))
        flow = FlowField(torch.tensor(flow_np, dtype=torch.float64))
        expected = bilinear_oracle(frame.pixels.numpy(), flow_np)
        out = warp(frame, flow)
        assert np.abs(out.pixels.numpy() - expected).max() < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_linearity_in_pixels(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_frame(rng, 6, 6, 3, lo=0.2, hi=0.4)
        y = rand_frame(rng, 6, 6, 3, lo=0.2, hi=0.4)
        a, b = 0.3, 0.6
        flow = FlowField(torch.tensor(rng.uniform(-2, 2, size=(6, 6, 2))))
        combo = Frame(a * x.pixels + b * y.pixels)
        lhs = warp(combo, flow).pixels
        rhs = a * warp(x, flow).pixels + b * warp(y, flow).pixels
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch_raises(self):
        frame = Frame(torch.zeros(4, 4, 1))
        flow = FlowField(torch.zeros(8, 8, 2))
        with pytest.raises(ContractViolation):
            warp(frame, flow)


class TestResampleMask:
    def test_constant_preserved_up_and_down(self):
        mask = PixelMask(torch.ones(4, 4))
        for direction in ("up", "down"):
            out = resample_mask(mask, 2, direction)
            assert bool((out.values == 1.0).all())

    def test_hand_computed_block_mean(self):
        mask = PixelMask(torch.tensor([[1.0, 0.0], [0.0, 0.0]]), hard=True)
        out = resample_mask(mask, 2, "down")
        assert out.values.shape == (1, 1)
        assert out.values.item() == 0.0  # mean 0.25 <= 0.5
        assert out.hard

    def test_up_replicates(self):
        mask = PixelMask(torch.tensor([[0.7]]))
        out = resample_mask(mask, 3, "up")
        assert out.values.shape == (3, 3)
        assert torch.allclose(out.values, torch.full((3, 3), 0.7))

    def test_up_down_identity_on_constant(self):
        mask = PixelMask(torch.full((3, 5), 0.25))
        roundtrip = resample_mask(resample_mask(mask, 4, "up"), 4, "down")
        assert torch.allclose(roundtrip.values, mask.values, atol=1e-7)

    def test_exact_half_binarizes_to_zero(self):
        mask = PixelMask(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), hard=True)
        out = resample_mask(mask, 2, "down")  # block mean exactly 0.5
        assert out.values.item() == 0.0

    def test_soft_down_keeps_fractions(self):
        mask = PixelMask(torch.tensor([[1.0, 0.0], [0.0, 0.0]]), hard=False)
        out = resample_mask(mask, 2, "down")
        assert abs(out.values.item() - 0.25) < 1e-7

    def test_reflect_pad_path(self):
        mask = PixelMask(torch.rand(5, 7))
        out = resample_mask(mask, 2, "down")
        assert out.values.shape == (3, 4)

    def test_bad_factor_raises(self):
        with pytest.raises(ContractViolation):
            resample_mask(PixelMask(torch.ones(2, 2)), 0, "up")


class TestPsnr:
    def test_identical_frames_hit_cap(self):
        frame = Frame(torch.rand(5, 5, 3))
        assert psnr(frame, frame) == 100.0

    def test_black_vs_white_is_zero(self):
        a = Frame(torch.zeros(4, 4, 3))
        b = Frame(torch.ones(4, 4, 3))
        assert abs(psnr(a, b)) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        a = rand_frame(rng, 16, 16, 3)
        b = rand_frame(rng, 16, 16, 3)
        total = 0.0
        ap, bp = a.pixels.numpy(), b.pixels.numpy()
        for y in range(16):
            for x in range(16):
                for c in range(3):
                    total += (ap[y, x, c] - bp[y, x, c]) ** 2
        expected = 10.0 * math.log10(1.0 / (total / (16 * 16 * 3)))
        assert abs(psnr(a, b) - expected) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(12)
        a = rand_frame(rng, 9, 7, 1)
        b = rand_frame(rng, 9, 7, 1)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ContractViolation):
            psnr(Frame(torch.zeros(2, 2, 1)), Frame(torch.zeros(3, 3, 1)))


class TestResizeHelpers:
    def test_area_downsample_is_block_mean(self):
        rng = np.random.default_rng(4)
        frame = rand_frame(rng, 8, 8, 3, dtype=torch.float32)
        out = downsample_frame_area(frame, 4)
        blocks = frame.pixels.reshape(2, 4, 2, 4, 3).mean(dim=(1, 3))
        assert torch.allclose(out.pixels, blocks, atol=1e-6)

    def test_upsample_shape(self):
        frame = Frame(torch.rand(4, 6, 3))
        out = upsample_frame(frame, 4)
        assert out.pixels.shape == (16, 24, 3)

    def test_indivisible_downsample_raises(self):
        with pytest.raises(ContractViolation):
            downsample_frame_area(Frame(torch.rand(6, 6, 1)), 4)


class TestFrameIO:
    def test_roundtrip_8bit(self, tmp_path):
        rng = np.random.default_rng(5)
        frame = rand_frame(rng, 12, 10, 3, dtype=torch.float32)
        save_frame(frame, tmp_path / "f.png", bit_depth=8)
        back = load_frame(tmp_path / "f.png")
        assert back.pixels.shape == (12, 10, 3)
        assert float((back.pixels - frame.pixels).abs().max()) <= 0.5 / 255 + 1e-6

    def test_roundtrip_16bit(self, tmp_path):
        rng = np.random.default_rng(6)
        frame = rand_frame(rng, 8, 8, 3, dtype=torch.float32)
        save_frame(frame, tmp_path / "f16.png", bit_depth=16)
        back = load_frame(tmp_path / "f16.png")
        assert float((back.pixels - frame.pixels).abs().max()) <= 0.5 / 65535 + 1e-7

    def test_channel_order_preserved(self, tmp_path):
        # red-ish top row, blue-ish bottom row
        arr = torch.zeros(2, 2, 3)
        arr[0, :, 0] = 1.0
        arr[1, :, 2] = 1.0
        save_frame(Frame(arr), tmp_path / "rb.png")
        back = load_frame(tmp_path / "rb.png")
        assert back.pixels[0, 0, 0] == 1.0 and back.pixels[0, 0, 2] == 0.0
        assert back.pixels[1, 0, 2] == 1.0 and back.pixels[1, 0, 0] == 0.0

    def test_grayscale_roundtrip(self, tmp_path):
        frame = Frame(torch.rand(6, 6, 1))
        save_frame(frame, tmp_path / "g.png")
        back = load_frame(tmp_path / "g.png")
        assert back.pixels.shape == (6, 6, 1)

    def test_clip_roundtrip_and_naming(self, tmp_path):
        rng = np.random.default_rng(7)
        clip = VideoClip(tuple(rand_frame(rng, 8, 8, 3, dtype=torch.float32, index=k)
                               for k in range(3)))
        save_clip(clip, tmp_path / "clip")
        assert (tmp_path / "clip" / "frame_000001.png").exists()
        assert (tmp_path / "clip" / "frame_000003.png").exists()
        back = load_clip(tmp_path / "clip")
        assert len(back) == 3
        assert back[1].frame_index == 1

    def test_load_missing_dir_raises(self, tmp_path):
        with pytest.raises(IOError):
            load_clip(tmp_path / "nope")
