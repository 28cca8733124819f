import math

import numpy as np
import pytest

from cemkit.degradations import (
    DegradationSpec,
    RainParams,
    degrade_dn,
    degrade_dr,
    degrade_sr,
    render_rain_layer,
    resize_bicubic,
    sample_rain_streaks,
)
from cemkit.imaging import ImageBuffer
from cemkit.streams import derive_generator


def cubic(x, a=-0.5):
    ax = abs(x)
    if ax <= 1:
        return (a + 2) * ax**3 - (a + 3) * ax**2 + 1
    if ax < 2:
        return a * (ax**3 - 5 * ax**2 + 8 * ax - 4)
    return 0.0


def downsample_1d_oracle(values, scale):
    """Direct antialiased kernel evaluation with exact summation."""
    n = len(values)
    ks = float(scale)
    hs = 2.0 * ks
    out = []
    for j in range(n // scale):
        u = (j + 0.5) * scale - 0.5
        i0, i1 = math.ceil(u - hs), math.floor(u + hs)
        idx = list(range(i0, i1 + 1))
        weights = [cubic((u - i) / ks) for i in idx]
        total = math.fsum(weights)
        out.append(
            math.fsum(
                w / total * values[min(max(i, 0), n - 1)] for w, i in zip(weights, idx)
            )
        )
    return np.array(out)


class TestDegradeSr:
    def test_constant_preserved(self):
        img = ImageBuffer(np.full((64, 64, 3), 0.42))
        out = degrade_sr(img, 4)
        assert out.data.shape == (16, 16, 3)
        assert np.abs(out.data - 0.42).max() < 1e-6

    def test_output_dims(self):
        img = ImageBuffer(np.random.default_rng(0).random((256, 256, 3)))
        out = degrade_sr(img, 4)
        assert (out.height, out.width) == (64, 64)

    def test_ramp_against_kernel_oracle(self):
        w = 64
        ramp = np.linspace(0.0, 1.0, w)
        img = ImageBuffer(np.tile(ramp[None, :, None], (8, 1, 3)))
        out = degrade_sr(img, 4)
        expected = downsample_1d_oracle(ramp, 4)
        assert np.abs(out.data[0, :, 0] - expected).max() < 1e-12
        # endpoints track the ramp sampled at the mapped pixel centers
        u_first, u_last = 1.5, 61.5
        assert abs(out.data[0, 0, 0] - u_first / (w - 1)) < 1e-3
        assert abs(out.data[0, -1, 0] - u_last / (w - 1)) < 1e-3

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_mirror_commutes_bit_exact(self, scale):
        rng = np.random.default_rng(scale)
        img = ImageBuffer(rng.random((24 * scale, 24 * scale, 3)))
        mirrored = ImageBuffer(img.data[:, ::-1].copy())
        a = degrade_sr(mirrored, scale).data
        b = degrade_sr(img, scale).data[:, ::-1]
        assert np.array_equal(a, b)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            degrade_sr(ImageBuffer(np.zeros((65, 64, 3))), 4)

    def test_upscale_shape(self):
        img = np.random.default_rng(1).random((16, 16, 3))
        up = resize_bicubic(img, 64, 64, antialias=False)
        assert up.shape == (64, 64, 3)
        assert up.min() >= 0.0 and up.max() <= 1.0


class TestDegradeDn:
    def test_degenerate_sigma(self):
        img = ImageBuffer(np.full((8, 8, 3), 0.5))
        out = degrade_dn(img, 1e-9, derive_generator(0, 1))
        assert np.abs(out.data - 0.5).max() < 1e-6

    def test_noise_std_matches_sigma(self):
        # 10^6 samples on mid-gray: no clamping, estimator within 2% relative
        img = ImageBuffer(np.full((640, 544, 3), 0.5))
        assert img.data.size > 1_000_000
        out = degrade_dn(img, 50.0, derive_generator(7, 1))
        observed = float(np.std(out.data - img.data))
        assert observed == pytest.approx(50.0 / 255.0, rel=0.02)

    def test_deterministic_given_stream(self):
        img = ImageBuffer(np.random.default_rng(2).random((32, 32, 3)))
        a = degrade_dn(img, 50.0, derive_generator(11, 3))
        b = degrade_dn(img, 50.0, derive_generator(11, 3))
        assert np.array_equal(a.data, b.data)

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            degrade_dn(ImageBuffer(np.zeros((4, 4, 3))), 0.0, derive_generator(0))

    def test_dims_preserved(self):
        img = ImageBuffer(np.zeros((12, 20, 1)))
        out = degrade_dn(img, 25.0, derive_generator(0))
        assert out.data.shape == (12, 20, 1)


class TestDegradeDr:
    def test_zero_density_is_identity(self):
        img = ImageBuffer(np.random.default_rng(3).random((32, 32, 3)))
        params = RainParams(density_per_megapixel=0.0)
        out = degrade_dr(img, params, derive_generator(0))
        assert np.array_equal(out.data, img.data)

    def test_streak_layer_nonneg_and_additive(self):
        rng = derive_generator(5)
        params = RainParams()
        streaks = sample_rain_streaks(64, 64, params, rng)
        layer = render_rain_layer(64, 64, streaks)
        assert layer.min() >= 0.0
        img = ImageBuffer(np.random.default_rng(4).random((64, 64, 3)))
        out = degrade_dr(img, params, derive_generator(5))
        assert np.all(out.data >= img.data - 1e-15)

    def test_poisson_count_oracle(self):
        # density 200/MP on 512x512: lambda = 52.4288
        params = RainParams(density_per_megapixel=200.0)
        lam = 200.0 * 512 * 512 / 1e6
        assert lam == pytest.approx(52.4288)
        counts = [
            len(sample_rain_streaks(512, 512, params, derive_generator(1000 + s)))
            for s in range(100)
        ]
        # mean of 100 Poisson draws: within 3 sigma / sqrt(100)
        assert abs(np.mean(counts) - lam) <= 3.0 * math.sqrt(lam) / 10.0

    def test_deterministic_given_stream(self):
        img = ImageBuffer(np.random.default_rng(6).random((48, 48, 3)))
        a = degrade_dr(img, RainParams(), derive_generator(9, 2))
        b = degrade_dr(img, RainParams(), derive_generator(9, 2))
        assert np.array_equal(a.data, b.data)

    def test_dims_preserved(self):
        img = ImageBuffer(np.zeros((30, 40, 3)))
        out = degrade_dr(img, RainParams(), derive_generator(1))
        assert out.data.shape == (30, 40, 3)


class TestDegradationSpec:
    def test_sr_roundtrip(self):
        spec = DegradationSpec.sr(4)
        assert spec.to_json() == {"task": "sr", "scale": 4}
        assert DegradationSpec.from_json(spec.to_json()) == spec

    def test_dn_roundtrip(self):
        spec = DegradationSpec.dn(50.0)
        assert spec.to_json() == {"task": "dn", "sigma": 50.0}
        assert DegradationSpec.from_json(spec.to_json()) == spec

    def test_dr_roundtrip_field_names(self):
        spec = DegradationSpec.dr()
        obj = spec.to_json()
        assert set(obj) == {"task", "rain"}
        assert set(obj["rain"]) == {
            "density_per_megapixel",
            "length_px",
            "width_px",
            "angle_deg",
            "intensity",
        }
        assert DegradationSpec.from_json(obj) == spec

    def test_cross_parameter_rejection(self):
        with pytest.raises(ValueError):
            DegradationSpec(task="sr", scale=4, sigma=50.0)
        with pytest.raises(ValueError):
            DegradationSpec(task="dn", sigma=50.0, scale=2)
        with pytest.raises(ValueError):
            DegradationSpec(task="sr", scale=1)
        with pytest.raises(ValueError):
            DegradationSpec(task="dn", sigma=-1.0)

    def test_apply_dispatch(self):
        img = ImageBuffer(np.full((16, 16, 3), 0.5))
        out = DegradationSpec.sr(4).apply(img)
        assert out.data.shape == (4, 4, 3)
        out = DegradationSpec.dn(50.0).apply(img, derive_generator(0))
        assert out.data.shape == (16, 16, 3)
        with pytest.raises(ValueError):
            DegradationSpec.dn(50.0).apply(img)  # stream required
