"""Effect classification, cross-run aggregation, and heatmap rendering."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .engine import CEM_VERSION, CausalEffectMap, load_cem
from .imaging import ImageBuffer

_RED = np.array([0.85, 0.1, 0.1])
_BLUE = np.array([0.1, 0.1, 0.85])
_GREEN = np.array([0.1, 0.75, 0.1])
_COLORBAR_H = 28


@dataclass(frozen=True)
class EffectStats:
    """Patch percentages and the finite effect range for one map.

    ROI patches count as positive (their effect is +inf); the range covers
    finite effects only. Ranges are None when every patch is inside the
    ROI.
    """

    positive_pct: float
    negative_pct: float
    none_pct: float
    range_min_db: float | None
    range_max_db: float | None
    epsilon: float


def classify_effects(cem: CausalEffectMap, epsilon: float | None = None) -> EffectStats:
    """Split patches into positive / negative / none at threshold epsilon."""
    if epsilon is None:
        epsilon = float(cem.config.get("tau", 0.01))
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    effects = cem.effects
    n = len(effects)
    roi_mask = np.isinf(effects)
    finite = effects[~roi_mask]
    positive = int(np.sum(finite > epsilon)) + int(np.sum(roi_mask))
    negative = int(np.sum(finite < -epsilon))
    none = int(np.sum(np.abs(finite) <= epsilon))
    return EffectStats(
        positive_pct=100.0 * positive / n,
        negative_pct=100.0 * negative / n,
        none_pct=100.0 * none / n,
        range_min_db=float(finite.min()) if len(finite) else None,
        range_max_db=float(finite.max()) if len(finite) else None,
        epsilon=float(epsilon),
    )


def aggregate_stats(stats: list[EffectStats]) -> EffectStats:
    """Arithmetic mean of percentages and of the range endpoints."""
    if not stats:
        raise ValueError("nothing to aggregate")
    eps = {s.epsilon for s in stats}
    if len(eps) != 1:
        raise ValueError(f"mixed classification thresholds: {sorted(eps)}")
    mins = [s.range_min_db for s in stats if s.range_min_db is not None]
    maxs = [s.range_max_db for s in stats if s.range_max_db is not None]
    return EffectStats(
        positive_pct=float(np.mean([s.positive_pct for s in stats])),
        negative_pct=float(np.mean([s.negative_pct for s in stats])),
        none_pct=float(np.mean([s.none_pct for s in stats])),
        range_min_db=float(np.mean(mins)) if mins else None,
        range_max_db=float(np.mean(maxs)) if maxs else None,
        epsilon=stats[0].epsilon,
    )


def render_heatmap_array(
    cem: CausalEffectMap, input_image: ImageBuffer, upscale: int = 4
) -> np.ndarray:
    """Overlay array in [0,1]: diverging tint per patch over the input.

    Red marks positive effects, blue negative, with alpha growing with
    |effect| normalized symmetrically to the largest finite magnitude, so
    scaling all effects leaves the picture unchanged. ROI patches are
    tinted and outlined green. A labeled colorbar strip is appended below.
    """
    grid = cem.grid
    if (input_image.height, input_image.width) != (
        grid.rows * grid.patch_size,
        grid.cols * grid.patch_size,
    ):
        raise ValueError("input image does not match the cem grid")
    if upscale < 1:
        raise ValueError("upscale must be >= 1")
    base = input_image.data.astype(np.float64)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    base = np.repeat(np.repeat(base, upscale, axis=0), upscale, axis=1)

    finite = cem.finite_effects
    vmax = float(np.max(np.abs(finite))) if len(finite) else 0.0
    cell = grid.patch_size * upscale
    out = base.copy()
    for i in range(grid.n):
        r, c = grid.rc(i)
        ys, xs = r * cell, c * cell
        block = out[ys : ys + cell, xs : xs + cell]
        e = cem.effects[i]
        if np.isinf(e):
            block[:] = (1 - 0.45) * block + 0.45 * _GREEN
            width = max(1, upscale)
            block[:width, :] = _GREEN
            block[-width:, :] = _GREEN
            block[:, :width] = _GREEN
            block[:, -width:] = _GREEN
            continue
        if vmax == 0.0 or e == 0.0:
            continue
        w = abs(e) / vmax
        tint = _RED if e > 0 else _BLUE
        alpha = 0.6 * w
        block[:] = (1 - alpha) * block + alpha * tint

    bar = _colorbar(out.shape[1], vmax)
    return np.clip(np.concatenate([out, bar], axis=0), 0.0, 1.0)


def _colorbar(width: int, vmax: float) -> np.ndarray:
    ramp = np.linspace(-1.0, 1.0, width)
    strip = np.ones((_COLORBAR_H, width, 3))
    for j, v in enumerate(ramp):
        tint = _RED if v > 0 else _BLUE
        alpha = 0.6 * abs(v)
        strip[:, j] = (1 - alpha) * 1.0 + alpha * tint
    img = Image.fromarray((strip * 255).round().astype(np.uint8))
    draw = ImageDraw.Draw(img)
    lo = -vmax
    labels = [(2, f"{lo:+.3f}"), (width // 2 - 10, "0"), (width - 52, f"{vmax:+.3f}")]
    for x, text in labels:
        draw.text((max(x, 0), _COLORBAR_H - 13), text, fill=(0, 0, 0))
    return np.asarray(img).astype(np.float64) / 255.0


def render_heatmap(
    cem: CausalEffectMap,
    input_image: ImageBuffer,
    out_path: str | os.PathLike,
    upscale: int = 4,
) -> None:
    arr = render_heatmap_array(cem, input_image, upscale)
    q = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(out_path, format="PNG")


_CSV_COLUMNS = [
    "model",
    "task",
    "positive_pct",
    "negative_pct",
    "none_pct",
    "range_min_db",
    "range_max_db",
    "inferences",
    "similarity",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def export_report(
    cem_paths: list[str | os.PathLike],
    out_path: str | os.PathLike,
    fmt: str = "csv",
    similarities: dict | None = None,
) -> None:
    """One row per map plus an aggregate row, as CSV or JSON."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    if not cem_paths:
        raise ValueError("no cem files given")
    rows = []
    stats_list = []
    for path in cem_paths:
        cem = load_cem(path)
        stats = classify_effects(
            cem, cem.stats.get("epsilon_db") if cem.stats else None
        )
        stats_list.append(stats)
        sim = similarities.get(str(path)) if similarities else None
        rows.append(
            {
                "model": cem.model_info.get("name"),
                "task": cem.model_info.get("task"),
                "positive_pct": stats.positive_pct,
                "negative_pct": stats.negative_pct,
                "none_pct": stats.none_pct,
                "range_min_db": stats.range_min_db,
                "range_max_db": stats.range_max_db,
                "inferences": cem.inference_count,
                "similarity": sim,
            }
        )
    agg = aggregate_stats(stats_list)
    rows.append(
        {
            "model": "aggregate",
            "task": "",
            "positive_pct": agg.positive_pct,
            "negative_pct": agg.negative_pct,
            "none_pct": agg.none_pct,
            "range_min_db": agg.range_min_db,
            "range_max_db": agg.range_max_db,
            "inferences": sum(r["inferences"] for r in rows),
            "similarity": None,
        }
    )
    out = Path(out_path)
    if fmt == "json":
        out.write_text(json.dumps(rows, indent=1) + "\n")
        return
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in _CSV_COLUMNS])
