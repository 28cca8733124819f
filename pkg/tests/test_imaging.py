import math

import numpy as np
import pytest
from PIL import Image

from cemkit.imaging import (
    ImageBuffer,
    PatchGrid,
    RoiRect,
    build_patch_grid,
    crop_region,
    gradient_magnitude,
    paste_patch,
    psnr,
    read_image,
    roi_input_footprint,
    write_image,
)


def save_png(path, arr_uint8, mode=None):
    img = Image.fromarray(arr_uint8, mode=mode)
    img.save(path, format="PNG")
    return path


class TestImageBuffer:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2, 3), 1.5))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2, 3), -0.1))

    def test_channel_validation(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((2, 2, 2)))

    def test_2d_promotes_to_single_channel(self):
        buf = ImageBuffer(np.zeros((4, 5)))
        assert (buf.height, buf.width, buf.channels) == (4, 5, 1)


class TestReadWrite:
    def test_white_pixel(self, tmp_path):
        p = save_png(tmp_path / "w.png", np.full((1, 1, 3), 255, dtype=np.uint8))
        buf = read_image(p)
        assert buf.data.flatten().tolist() == [1.0, 1.0, 1.0]

    def test_black_pixel(self, tmp_path):
        p = save_png(tmp_path / "b.png", np.zeros((1, 1, 3), dtype=np.uint8))
        buf = read_image(p)
        assert buf.data.flatten().tolist() == [0.0, 0.0, 0.0]

    def test_gray_levels(self, tmp_path):
        levels = np.array([[0, 85], [170, 255]], dtype=np.uint8)
        p = save_png(tmp_path / "g.png", levels, mode="L")
        buf = read_image(p)
        expected = levels.astype(np.float64) / 255.0  # the stated mapping
        assert buf.channels == 1
        assert np.abs(buf.data[:, :, 0] - expected).max() < 1e-3

    def test_sixteen_bit_gray(self, tmp_path):
        arr = np.array([[0, 32768], [49152, 65535]], dtype=np.uint16)
        img = Image.fromarray(arr)
        img.save(tmp_path / "g16.png", format="PNG")
        buf = read_image(tmp_path / "g16.png")
        expected = arr.astype(np.float64) / 65535.0
        assert np.abs(buf.data[:, :, 0] - expected).max() < 1e-4

    def test_alpha_dropped(self, tmp_path):
        rgba = np.zeros((2, 2, 4), dtype=np.uint8)
        rgba[..., 3] = 255
        rgba[..., 0] = 200
        p = save_png(tmp_path / "a.png", rgba, mode="RGBA")
        buf = read_image(p)
        assert buf.channels == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_image(tmp_path / "nope.png")

    def test_not_an_image(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_text("not a png")
        with pytest.raises(Exception):
            read_image(bad)

    def test_round_trip_ones(self, tmp_path):
        buf = ImageBuffer(np.ones((1, 1, 3)))
        write_image(buf, tmp_path / "x.png")
        back = read_image(tmp_path / "x.png")
        assert np.array_equal(back.data, np.ones((1, 1, 3), dtype=np.float32))

    def test_round_trip_half(self, tmp_path):
        buf = ImageBuffer(np.full((1, 1, 3), 0.5))
        write_image(buf, tmp_path / "x.png")
        back = read_image(tmp_path / "x.png")
        assert np.abs(back.data - 0.5).max() <= 1.0 / 255.0

    def test_round_trip_random_within_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        buf = ImageBuffer(rng.random((16, 16, 3)))
        write_image(buf, tmp_path / "x.png")
        back = read_image(tmp_path / "x.png")
        assert np.abs(back.data - buf.data).max() <= 0.5 / 255.0 + 1e-9

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file.txt"
        blocker.write_text("x")
        with pytest.raises(OSError):
            write_image(ImageBuffer(np.ones((1, 1, 3))), blocker / "x.png")


class TestPsnr:
    def region(self, h, w):
        return RoiRect(0, 0, w, h)

    def test_identical_capped(self):
        a = ImageBuffer(np.full((4, 4, 3), 0.25))
        assert psnr(a, a, self.region(4, 4)) == 100.0

    def test_zero_vs_one(self):
        a = ImageBuffer(np.zeros((4, 4, 3)))
        b = ImageBuffer(np.ones((4, 4, 3)))
        assert psnr(a, b, self.region(4, 4)) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_one_step(self):
        # closed form: 10*log10(255^2) = 20*log10(255)
        a = ImageBuffer(np.full((8, 8, 3), 0.25))
        b = ImageBuffer(np.full((8, 8, 3), 0.25 + 1.0 / 255.0))
        expected = 20.0 * math.log10(255.0)
        assert psnr(a, b, self.region(8, 8)) == pytest.approx(expected, abs=1e-3)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = ImageBuffer(rng.random((6, 7, 3)))
        b = ImageBuffer(rng.random((6, 7, 3)))
        r = RoiRect(1, 2, 4, 3)
        assert psnr(a, b, r) == psnr(b, a, r)

    def test_halving_error_gains_6db(self):
        # power-of-two offsets keep the arithmetic exact in float64
        d = 2.0 ** -8
        a = ImageBuffer(np.full((4, 4, 3), 0.25))
        b1 = ImageBuffer(np.full((4, 4, 3), 0.25 + d))
        b2 = ImageBuffer(np.full((4, 4, 3), 0.25 + d / 2))
        gain = psnr(a, b2, self.region(4, 4)) - psnr(a, b1, self.region(4, 4))
        assert gain == pytest.approx(20.0 * math.log10(2.0), abs=1e-9)

    def test_strictly_decreasing_in_mse(self):
        a = ImageBuffer(np.full((4, 4, 3), 0.5))
        values = []
        for d in (0.01, 0.02, 0.05, 0.1, 0.2):
            b = ImageBuffer(np.full((4, 4, 3), 0.5 + d))
            values.append(psnr(a, b, self.region(4, 4)))
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_luminance_mode(self):
        rng = np.random.default_rng(2)
        a = ImageBuffer(rng.random((4, 4, 3)))
        b = ImageBuffer(rng.random((4, 4, 3)))
        r = self.region(4, 4)
        ya = a.data @ np.array([0.299, 0.587, 0.114])
        yb = b.data @ np.array([0.299, 0.587, 0.114])
        expected = 10 * math.log10(1.0 / np.mean((ya - yb) ** 2))
        assert psnr(a, b, r, luminance=True) == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        a = ImageBuffer(np.zeros((4, 4, 3)))
        b = ImageBuffer(np.zeros((4, 5, 3)))
        with pytest.raises(ValueError):
            psnr(a, b, self.region(4, 4))

    def test_region_out_of_bounds(self):
        a = ImageBuffer(np.zeros((4, 4, 3)))
        with pytest.raises(ValueError):
            psnr(a, a, RoiRect(2, 2, 4, 4))


class TestCropPaste:
    def test_crop_full_identity(self, toy_image):
        out = crop_region(toy_image, RoiRect(0, 0, toy_image.width, toy_image.height))
        assert np.array_equal(out.data, toy_image.data)

    def test_crop_single_pixel(self):
        data = np.arange(12, dtype=np.float64).reshape(2, 2, 3) / 12.0
        buf = ImageBuffer(data)
        out = crop_region(buf, RoiRect(1, 0, 1, 1))
        assert np.array_equal(out.data[0, 0], data[0, 1])

    def test_crop_paste_inverse(self, toy_image):
        rect = RoiRect(8, 16, 8, 8)
        patch = crop_region(toy_image, rect)
        back = paste_patch(toy_image, rect, patch)
        assert np.array_equal(back.data, toy_image.data)

    def test_paste_then_crop_returns_patch(self, toy_image):
        rect = RoiRect(24, 8, 8, 8)
        patch = ImageBuffer(np.random.default_rng(5).random((8, 8, 3)))
        pasted = paste_patch(toy_image, rect, patch)
        assert np.array_equal(crop_region(pasted, rect).data, patch.data)

    def test_paste_zeros_counted_diff(self, toy_image):
        rect = RoiRect(0, 0, 8, 8)
        zeros = ImageBuffer(np.zeros((8, 8, 3)))
        pasted = paste_patch(toy_image, rect, zeros)
        assert int(np.sum(pasted.data != toy_image.data)) == 8 * 8 * 3

    def test_disjoint_pastes_commute(self, toy_image):
        r1, r2 = RoiRect(0, 0, 8, 8), RoiRect(16, 16, 8, 8)
        p1 = ImageBuffer(np.full((8, 8, 3), 0.1))
        p2 = ImageBuffer(np.full((8, 8, 3), 0.9))
        a = paste_patch(paste_patch(toy_image, r1, p1), r2, p2)
        b = paste_patch(paste_patch(toy_image, r2, p2), r1, p1)
        assert np.array_equal(a.data, b.data)

    def test_outside_pixels_untouched(self, toy_image):
        rect = RoiRect(8, 8, 8, 8)
        pasted = paste_patch(toy_image, rect, ImageBuffer(np.zeros((8, 8, 3))))
        mask = np.ones(toy_image.data.shape, dtype=bool)
        mask[8:16, 8:16] = False
        assert np.array_equal(pasted.data[mask], toy_image.data[mask])

    def test_size_mismatch(self, toy_image):
        with pytest.raises(ValueError):
            paste_patch(toy_image, RoiRect(0, 0, 8, 8), ImageBuffer(np.zeros((4, 4, 3))))

    def test_out_of_bounds(self, toy_image):
        with pytest.raises(ValueError):
            crop_region(toy_image, RoiRect(60, 60, 8, 8))


class TestGradient:
    def test_constant_is_zero(self):
        assert gradient_magnitude(ImageBuffer(np.full((4, 4, 3), 0.7))) == 0.0

    def test_hand_case(self):
        # [[0,1],[0,1]]: two horizontal diffs of 1, two vertical diffs of 0
        patch = ImageBuffer(np.array([[0.0, 1.0], [0.0, 1.0]])[:, :, None])
        assert gradient_magnitude(patch) == pytest.approx(math.sqrt(2.0), rel=1e-15)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(3)
        base = rng.random((6, 6, 3))
        g1 = gradient_magnitude(ImageBuffer(base))
        g2 = gradient_magnitude(ImageBuffer(base * 0.5))
        assert g2 == pytest.approx(0.5 * g1, rel=1e-12)

    def test_translation_invariance_bit_exact(self):
        # samples on a 2^-10 lattice plus a 2^-2 shift: exact float arithmetic
        rng = np.random.default_rng(4)
        base = rng.integers(0, 512, size=(5, 5, 3)) / 1024.0
        g1 = gradient_magnitude(ImageBuffer(base))
        g2 = gradient_magnitude(ImageBuffer(base + 0.25))
        assert g1 == g2

    def test_degenerate_dimension(self):
        with pytest.raises(ValueError):
            gradient_magnitude(ImageBuffer(np.zeros((1, 4, 3))))


class TestPatchGrid:
    def test_paper_geometry(self):
        grid = build_patch_grid(256, 256, 8)
        assert (grid.rows, grid.cols, grid.n) == (32, 32, 1024)

    def test_small_grid(self):
        grid = build_patch_grid(64, 64, 8)
        assert (grid.rows, grid.cols, grid.n) == (8, 8, 64)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            build_patch_grid(250, 256, 8)

    def test_index_round_trip(self):
        grid = build_patch_grid(32, 64, 8)
        for i in range(grid.n):
            r, c = grid.rc(i)
            assert grid.index(r, c) == i

    def test_rect_footprint(self):
        grid = build_patch_grid(32, 32, 8)
        rect = grid.rect(5)  # row 1, col 1
        assert (rect.x, rect.y, rect.w, rect.h) == (8, 8, 8, 8)


def brute_force_inside(roi, scale, grid):
    """Oracle: patch is inside iff any of its pixels maps into the ROI cover."""
    x0, y0 = roi.x // scale, roi.y // scale
    x1 = -(-(roi.x + roi.w) // scale)
    y1 = -(-(roi.y + roi.h) // scale)
    inside = set()
    ps = grid.patch_size
    for i in range(grid.n):
        r, c = grid.rc(i)
        ys, xs = r * ps, c * ps
        for py in range(ys, ys + ps):
            for px in range(xs, xs + ps):
                if y0 <= py < y1 and x0 <= px < x1:
                    inside.add(i)
                    break
            else:
                continue
            break
    return frozenset(inside)


class TestRoiFootprint:
    def test_aligned_scale4(self):
        grid = build_patch_grid(64, 64, 8)
        rect, inside = roi_input_footprint(RoiRect(64, 64, 32, 32), 4, grid)
        assert (rect.x, rect.y, rect.w, rect.h) == (16, 16, 8, 8)
        assert inside == frozenset({grid.index(2, 2)})

    def test_identity_scale(self):
        grid = build_patch_grid(64, 64, 8)
        rect, inside = roi_input_footprint(RoiRect(0, 0, 8, 8), 1, grid)
        assert inside == frozenset({0})

    def test_misaligned_scale4_overlaps_four(self):
        grid = build_patch_grid(64, 64, 8)
        roi = RoiRect(62, 62, 4, 4)
        rect, inside = roi_input_footprint(roi, 4, grid)
        assert (rect.x, rect.y, rect.w, rect.h) == (15, 15, 2, 2)
        assert inside == brute_force_inside(roi, 4, grid)
        assert len(inside) == 4

    @pytest.mark.parametrize("scale,roi", [
        (1, RoiRect(8, 16, 16, 8)),
        (2, RoiRect(3, 5, 20, 17)),
        (4, RoiRect(0, 0, 9, 9)),
        (3, RoiRect(50, 40, 30, 20)),
    ])
    def test_matches_brute_force(self, scale, roi):
        grid = build_patch_grid(32, 32, 8)
        _, inside = roi_input_footprint(roi, scale, grid)
        assert inside == brute_force_inside(roi, scale, grid)

    def test_patch_aligned_roi_tiles_exactly(self):
        grid = build_patch_grid(64, 64, 8)
        _, inside = roi_input_footprint(RoiRect(16, 24, 16, 8), 1, grid)
        assert inside == frozenset({grid.index(3, 2), grid.index(3, 3)})

    def test_roi_outside_bounds(self):
        grid = build_patch_grid(64, 64, 8)
        with pytest.raises(ValueError):
            roi_input_footprint(RoiRect(60, 60, 8, 8), 1, grid)
