"""Image buffers, patch geometry, and the quality / gradient measurements.

All pixel data lives in [0, 1] floating point, shaped (height, width,
channels). 8-bit files map by value/255, 16-bit by value/65535. Quantities
quoted on the 8-bit scale elsewhere (noise sigma, for instance) are divided
by 255 before they touch these buffers.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

# Finite stand-in for infinite PSNR on identical regions. Far above any
# realistic restoration value, keeps aggregation and JSON finite.
PSNR_CAP_DB = 100.0

# BT.601 luma weights, used only when PSNR is asked for in luminance mode.
_LUMA = np.array([0.299, 0.587, 0.114])


class ImageBuffer:
    """H x W x C floating-point image with samples in [0, 1].

    `data` is a numpy array of shape (height, width, channels), float32 or
    float64. Files read as float32; metric and model arithmetic happens in
    float64 regardless of the storage dtype.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be HxWxC, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("zero-dimension image")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        lo = float(arr.min())
        hi = float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"samples outside [0,1]: min={lo}, max={hi}")
        self.data = arr

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "ImageBuffer":
        """Trusted constructor: caller guarantees shape and range."""
        obj = object.__new__(cls)
        obj.data = data
        return obj

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer._wrap(self.data.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageBuffer)
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self) -> str:
        return f"ImageBuffer({self.height}x{self.width}x{self.channels}, {self.data.dtype})"


@dataclass(frozen=True)
class RoiRect:
    """Axis-aligned rectangle, top-left (x, y), in output-image pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"rectangle must have positive size, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"rectangle origin must be non-negative, got ({self.x},{self.y})")

    def inside(self, height: int, width: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class PatchGrid:
    """Regular grid of square patches tiling an input image exactly."""

    patch_size: int
    rows: int
    cols: int

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def rc(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.n:
            raise IndexError(f"patch index {index} outside [0,{self.n})")
        return divmod(index, self.cols)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"patch ({row},{col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def rect(self, index: int) -> RoiRect:
        """Pixel footprint of patch `index` in input-image coordinates."""
        r, c = self.rc(index)
        return RoiRect(c * self.patch_size, r * self.patch_size, self.patch_size, self.patch_size)


def read_image(path: str | os.PathLike) -> ImageBuffer:
    """Read an 8-bit or 16-bit PNG into a [0,1] buffer. Alpha is dropped."""
    with Image.open(path) as img:
        mode = img.mode
        if mode in ("RGBA", "LA"):
            img = img.convert(mode[:-1])
            mode = img.mode
        elif mode == "P":
            img = img.convert("RGB")
            mode = "RGB"
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.size == 0:
        raise ValueError(f"zero-dimension image: {path}")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        # 16-bit grayscale comes through PIL as I;16 / I.
        scale = 65535.0
    else:
        raise ValueError(f"unsupported sample format {arr.dtype} in {path}")
    data = (arr.astype(np.float64) / scale).astype(np.float32)
    return ImageBuffer._wrap(np.clip(data, 0.0, 1.0))


def write_image(image: ImageBuffer, path: str | os.PathLike) -> None:
    """Write an 8-bit PNG. Samples are quantized by round(v * 255)."""
    q = np.rint(image.data * 255.0).astype(np.uint8)
    if image.channels == 1:
        pil = Image.fromarray(q[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(q, mode="RGB")
    pil.save(path, format="PNG")


def _check_region(img: ImageBuffer, region: RoiRect) -> None:
    if not region.inside(img.height, img.width):
        raise ValueError(
            f"region {region} outside image bounds {img.height}x{img.width}"
        )


def region_mse(a: np.ndarray, b: np.ndarray, region: RoiRect) -> float:
    """Mean squared difference over a rectangular region, all channels."""
    ya, xa = region.y, region.x
    d = a[ya : ya + region.h, xa : xa + region.w].astype(np.float64) - b[
        ya : ya + region.h, xa : xa + region.w
    ].astype(np.float64)
    return float(np.mean(d * d))


def mse_to_psnr(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def psnr(a: ImageBuffer, b: ImageBuffer, region: RoiRect, luminance: bool = False) -> float:
    """PSNR in dB over `region`, peak 1.0.

    MSE is taken over all channels jointly unless `luminance`, which first
    projects RGB onto BT.601 luma. Identical regions return the 100 dB cap.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"dimension mismatch: {a.data.shape} vs {b.data.shape}")
    _check_region(a, region)
    if luminance and a.channels == 3:
        ya, xa = region.y, region.x
        ra = a.data[ya : ya + region.h, xa : xa + region.w] @ _LUMA
        rb = b.data[ya : ya + region.h, xa : xa + region.w] @ _LUMA
        d = ra - rb
        return mse_to_psnr(float(np.mean(d * d)))
    return mse_to_psnr(region_mse(a.data, b.data, region))


def crop_region(image: ImageBuffer, rect: RoiRect) -> ImageBuffer:
    """Copy a rectangular window out of `image` (image coordinates)."""
    _check_region(image, rect)
    out = image.data[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w].copy()
    return ImageBuffer._wrap(out)


def paste_patch(image: ImageBuffer, rect: RoiRect, patch: ImageBuffer) -> ImageBuffer:
    """Return a new buffer with `patch` written into `rect`.

    Pixels outside the rectangle are copied bit-exact.
    """
    _check_region(image, rect)
    if (patch.height, patch.width, patch.channels) != (rect.h, rect.w, image.channels):
        raise ValueError(
            f"patch {patch.height}x{patch.width}x{patch.channels} does not fit "
            f"rect {rect.h}x{rect.w}x{image.channels}"
        )
    # Promote so pasting a wider-precision patch never quantizes it.
    dtype = np.result_type(image.data.dtype, patch.data.dtype)
    out = image.data.astype(dtype, copy=True)
    out[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w] = patch.data
    return ImageBuffer._wrap(out)


def gradient_magnitude(patch: ImageBuffer) -> float:
    """Content-variation measure: l2 norm of all adjacent-pixel differences.

    G = sqrt(sum of squared horizontal diffs + sum of squared vertical
    diffs), over all channels. Zero iff the patch is constant.
    """
    if patch.height < 2 or patch.width < 2:
        raise ValueError("gradient needs at least 2 pixels in each dimension")
    data = patch.data.astype(np.float64)
    dh = np.diff(data, axis=1)
    dv = np.diff(data, axis=0)
    return float(np.sqrt(np.sum(dh * dh) + np.sum(dv * dv)))


def build_patch_grid(input_height: int, input_width: int, patch_size: int) -> PatchGrid:
    """Tile an input image with square patches; dimensions must divide."""
    if patch_size < 2:
        raise ValueError(f"patch size must be >= 2, got {patch_size}")
    if input_height % patch_size or input_width % patch_size:
        raise ValueError(
            f"image {input_height}x{input_width} not divisible by patch size "
            f"{patch_size}; crop to a multiple first"
        )
    return PatchGrid(patch_size, input_height // patch_size, input_width // patch_size)


def roi_input_footprint(
    roi: RoiRect, scale: int, grid: PatchGrid
) -> tuple[RoiRect, frozenset[int]]:
    """Map an output-space ROI back onto the input patch grid.

    Returns the covering input-space rectangle and the set of patch indices
    whose footprint overlaps it by at least one pixel. Those patches are the
    direct contributors to the ROI's content and are excluded from
    intervention.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    in_h = grid.rows * grid.patch_size
    in_w = grid.cols * grid.patch_size
    out_h, out_w = in_h * scale, in_w * scale
    if not roi.inside(out_h, out_w):
        raise ValueError(f"roi {roi} outside output bounds {out_h}x{out_w}")
    x0 = roi.x // scale
    y0 = roi.y // scale
    x1 = -(-(roi.x + roi.w) // scale)  # ceil division
    y1 = -(-(roi.y + roi.h) // scale)
    rect = RoiRect(x0, y0, x1 - x0, y1 - y0)
    ps = grid.patch_size
    c0, c1 = x0 // ps, (x1 - 1) // ps
    r0, r1 = y0 // ps, (y1 - 1) // ps
    inside = frozenset(
        grid.index(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)
    )
    return rect, inside
