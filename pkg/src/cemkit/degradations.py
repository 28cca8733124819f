"""Task degradations: bicubic downsampling, Gaussian noise, rain streaks.

One frozen degradation pipeline is shared by inputs, ground truths, and
intervention patches, so every analyzed image and every replacement patch
lies in the same degradation distribution.

All operations are pure given an explicit random generator; callers own
stream partitioning (one derived stream per image).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import ImageBuffer

# Catmull-Rom style cubic, the de-facto resize convention of SR datasets.
_CUBIC_A = -0.5


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    a = _CUBIC_A
    inner = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    outer = a * (ax3 - 5.0 * ax2 + 8.0 * ax - 4.0)
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _axis_windows(in_len: int, out_len: int, antialias: bool):
    """Tap indices and normalized weights for one separable resize pass.

    Windows are symmetric about each output pixel's source center and
    weights are accumulated in a symmetric pair order, which makes the
    whole pass commute bit-exactly with mirroring (needed so degraded
    library patches match degraded inputs regardless of orientation).
    """
    ratio = in_len / out_len
    ks = ratio if (antialias and ratio > 1.0) else 1.0
    hs = 2.0 * ks
    j = np.arange(out_len, dtype=np.float64)
    u = (j + 0.5) * ratio - 0.5
    i0 = np.ceil(u - hs).astype(np.int64)
    i1 = np.floor(u + hs).astype(np.int64)
    taps = int((i1 - i0).max()) + 1
    m = np.arange(taps, dtype=np.int64)
    idx = i0[:, None] + m[None, :]
    x = (u[:, None] - idx.astype(np.float64)) / ks
    w = _cubic_kernel(x)
    idx = np.clip(idx, 0, in_len - 1)
    # Normalize by a pair-ordered sum so mirrored windows normalize
    # identically at the bit level.
    wsum = np.zeros(out_len, dtype=np.float64)
    for k in range(taps // 2):
        wsum += w[:, k] + w[:, taps - 1 - k]
    if taps % 2:
        wsum += w[:, taps // 2]
    w = w / wsum[:, None]
    return idx, w


def _resize_last_axis(arr: np.ndarray, out_len: int, antialias: bool) -> np.ndarray:
    in_len = arr.shape[-1]
    if in_len == out_len:
        return arr.copy()
    idx, w = _axis_windows(in_len, out_len, antialias)
    taps = idx.shape[1]
    out = np.zeros(arr.shape[:-1] + (out_len,), dtype=np.float64)
    for k in range(taps // 2):
        k2 = taps - 1 - k
        out += arr[..., idx[:, k]] * w[:, k] + arr[..., idx[:, k2]] * w[:, k2]
    if taps % 2:
        k = taps // 2
        out += arr[..., idx[:, k]] * w[:, k]
    return out


def resize_bicubic(data: np.ndarray, out_h: int, out_w: int, antialias: bool) -> np.ndarray:
    """Separable bicubic resize (a = -0.5), replicated borders.

    With `antialias` the kernel support is widened by the scale factor on
    downscaling passes. Output is clamped to [0, 1].
    """
    work = np.moveaxis(data.astype(np.float64), 0, -1)  # (W, C, H)
    work = _resize_last_axis(work, out_h, antialias)
    work = np.moveaxis(work, -1, 0)  # (H', W, C)
    work = np.moveaxis(work, 1, -1)  # (H', C, W)
    work = _resize_last_axis(work, out_w, antialias)
    work = np.moveaxis(work, -1, 1)  # (H', W', C)
    return np.clip(work, 0.0, 1.0)


@dataclass(frozen=True)
class RainParams:
    """Streak synthesis ranges; the declared medium-rain defaults."""

    density_per_megapixel: float = 150.0
    length_px: tuple[float, float] = (20.0, 40.0)
    width_px: tuple[float, float] = (1.0, 2.0)
    angle_deg: tuple[float, float] = (70.0, 110.0)
    intensity: tuple[float, float] = (0.2, 0.5)

    def to_json(self) -> dict:
        return {
            "density_per_megapixel": self.density_per_megapixel,
            "length_px": list(self.length_px),
            "width_px": list(self.width_px),
            "angle_deg": list(self.angle_deg),
            "intensity": list(self.intensity),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RainParams":
        return cls(
            density_per_megapixel=float(obj["density_per_megapixel"]),
            length_px=tuple(obj["length_px"]),
            width_px=tuple(obj["width_px"]),
            angle_deg=tuple(obj["angle_deg"]),
            intensity=tuple(obj["intensity"]),
        )


@dataclass(frozen=True)
class DegradationSpec:
    """Which corruption defines the task, with its parameters.

    Exactly the parameters of the active task are set: scale for sr,
    sigma (8-bit units) for dn, rain ranges for dr.
    """

    task: str
    scale: int | None = None
    sigma: float | None = None
    rain: RainParams | None = None

    def __post_init__(self):
        if self.task not in ("sr", "dn", "dr"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "sr":
            if self.scale is None or self.scale < 2:
                raise ValueError("sr requires scale >= 2")
            if self.sigma is not None or self.rain is not None:
                raise ValueError("sr spec must not carry sigma or rain")
        elif self.task == "dn":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("dn requires sigma > 0")
            if self.scale is not None or self.rain is not None:
                raise ValueError("dn spec must not carry scale or rain")
        else:
            if self.rain is None:
                raise ValueError("dr requires rain parameters")
            if self.scale is not None or self.sigma is not None:
                raise ValueError("dr spec must not carry scale or sigma")

    @classmethod
    def sr(cls, scale: int = 4) -> "DegradationSpec":
        return cls(task="sr", scale=scale)

    @classmethod
    def dn(cls, sigma: float = 50.0) -> "DegradationSpec":
        return cls(task="dn", sigma=sigma)

    @classmethod
    def dr(cls, rain: RainParams | None = None) -> "DegradationSpec":
        return cls(task="dr", rain=rain if rain is not None else RainParams())

    def to_json(self) -> dict:
        obj: dict = {"task": self.task}
        if self.task == "sr":
            obj["scale"] = self.scale
        elif self.task == "dn":
            obj["sigma"] = self.sigma
        else:
            obj["rain"] = self.rain.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "DegradationSpec":
        task = obj["task"]
        if task == "sr":
            return cls.sr(int(obj["scale"]))
        if task == "dn":
            return cls.dn(float(obj["sigma"]))
        return cls.dr(RainParams.from_json(obj["rain"]))

    def apply(self, image: ImageBuffer, rng: np.random.Generator | None = None) -> ImageBuffer:
        if self.task == "sr":
            return degrade_sr(image, self.scale)
        if rng is None:
            raise ValueError(f"{self.task} degradation needs a random stream")
        if self.task == "dn":
            return degrade_dn(image, self.sigma, rng)
        return degrade_dr(image, self.rain, rng)


def degrade_sr(image: ImageBuffer, scale: int) -> ImageBuffer:
    """Bicubic downsample by an integer factor with antialiasing."""
    if scale < 2:
        raise ValueError(f"scale must be >= 2, got {scale}")
    if image.height % scale or image.width % scale:
        raise ValueError(
            f"image {image.height}x{image.width} not divisible by scale {scale}"
        )
    out = resize_bicubic(image.data, image.height // scale, image.width // scale, antialias=True)
    return ImageBuffer._wrap(out)


def degrade_dn(image: ImageBuffer, sigma: float, rng: np.random.Generator) -> ImageBuffer:
    """Additive i.i.d. Gaussian noise, std sigma/255, clamped to [0, 1]."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    noise = rng.normal(0.0, sigma / 255.0, size=image.data.shape)
    return ImageBuffer._wrap(np.clip(image.data + noise, 0.0, 1.0))


@dataclass(frozen=True)
class Streak:
    cy: float
    cx: float
    length: float
    width: float
    angle_deg: float
    amplitude: float


def sample_rain_streaks(
    height: int, width: int, params: RainParams, rng: np.random.Generator
) -> list[Streak]:
    """Draw streak count (Poisson in the image area) and geometry."""
    lam = params.density_per_megapixel * height * width / 1e6
    count = int(rng.poisson(lam)) if lam > 0 else 0
    streaks = []
    for _ in range(count):
        streaks.append(
            Streak(
                cy=float(rng.uniform(0, height)),
                cx=float(rng.uniform(0, width)),
                length=float(rng.uniform(*params.length_px)),
                width=float(rng.uniform(*params.width_px)),
                angle_deg=float(rng.uniform(*params.angle_deg)),
                amplitude=float(rng.uniform(*params.intensity)),
            )
        )
    return streaks


def render_rain_layer(height: int, width: int, streaks: list[Streak]) -> np.ndarray:
    """Accumulate anti-aliased streaks with a Gaussian cross-profile."""
    layer = np.zeros((height, width), dtype=np.float64)
    for s in streaks:
        theta = math.radians(s.angle_deg)
        dx, dy = math.cos(theta), math.sin(theta)
        hl = s.length / 2.0
        sig = max(s.width / 2.0, 1e-6)
        rx = abs(dx) * hl + 3.0 * sig + 1.0
        ry = abs(dy) * hl + 3.0 * sig + 1.0
        x0, x1 = max(int(s.cx - rx), 0), min(int(s.cx + rx) + 2, width)
        y0, y1 = max(int(s.cy - ry), 0), min(int(s.cy + ry) + 2, height)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs - s.cx
        py = ys - s.cy
        t = px * dx + py * dy
        dperp = np.abs(py * dx - px * dy)
        cross = np.exp(-(dperp * dperp) / (2.0 * sig * sig))
        ends = np.clip(hl + 0.5 - np.abs(t), 0.0, 1.0)
        layer[y0:y1, x0:x1] += s.amplitude * cross * ends
    return layer


def degrade_dr(
    image: ImageBuffer, params: RainParams, rng: np.random.Generator
) -> ImageBuffer:
    """Additive synthetic rain streaks, clamped to [0, 1]."""
    streaks = sample_rain_streaks(image.height, image.width, params, rng)
    layer = render_rain_layer(image.height, image.width, streaks)
    out = np.clip(image.data + layer[:, :, None], 0.0, 1.0)
    return ImageBuffer._wrap(out)
