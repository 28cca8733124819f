"""Causal effect map computation.

For every grid patch outside the ROI footprint, the engine replaces the
patch with degradation-matched library patches, re-runs the model, and
records the drop in ROI quality. The per-patch effect is the average
treatment effect: the mean of (baseline - post-intervention PSNR) over the
interventions. Patches inside the ROI footprint carry a +inf sentinel.

Two schedules are provided. `full` applies T interventions to every
outside patch. `fast` first applies C cheap interventions to each patch,
splits the grid into an unrelated set (every coarse deviation below tau)
and a sensitive set, then refines only the sensitive patches with F
density-sampled interventions; unrelated patches reuse their coarse
samples, which is what makes the scheme cheap.

Every random draw comes from a stream keyed by (seed, stage, patch,
intervention), so results are bit-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .degradations import DegradationSpec
from .imaging import (
    ImageBuffer,
    PatchGrid,
    RoiRect,
    build_patch_grid,
    mse_to_psnr,
    region_mse,
    roi_input_footprint,
)
from .library import GradientDensity, InterventionLibrary, sample_patch
from .models import ModelHandle
from .streams import STAGE_COARSE, STAGE_FINE, STAGE_FULL, StreamNode

CEM_VERSION = 1
ROI_SENTINEL_NOTE = "null means +inf (inside ROI)"


@dataclass(frozen=True)
class EngineConfig:
    """All intervention-schedule constants, defaults as published."""

    T: int = 500
    C: int = 3
    F: int = 50
    tau: float = 0.01
    patch_size: int = 8
    mode: str = "full"
    sampling: str = "density"
    coarse_sampling: str | None = None  # None mirrors `sampling`
    seed: int = 0
    workers: int = 1
    epsilon_classify: float | None = None  # None mirrors `tau`

    def __post_init__(self):
        if not (1 <= self.C <= self.F <= self.T):
            raise ValueError(f"need 1 <= C <= F <= T, got C={self.C} F={self.F} T={self.T}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.mode not in ("full", "fast"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name, value in (("sampling", self.sampling), ("coarse_sampling", self.coarse_sampling)):
            if value is not None and value not in ("density", "uniform"):
                raise ValueError(f"unknown {name} {value!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def effective_coarse_sampling(self) -> str:
        return self.coarse_sampling if self.coarse_sampling is not None else self.sampling

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon_classify if self.epsilon_classify is not None else self.tau


@dataclass
class CoarsePartition:
    """Coarse-stage split of outside patches, with the samples retained.

    coarse_diffs[i] holds the C values (baseline - post PSNR) for patch i.
    """

    unrelated: frozenset[int]
    sensitive: frozenset[int]
    roi_patches: frozenset[int]
    coarse_diffs: dict[int, np.ndarray]

    def __post_init__(self):
        if self.unrelated & self.sensitive:
            raise ValueError("unrelated and sensitive sets overlap")


@dataclass
class CausalEffectMap:
    """Per-patch causal effects over one input image.

    `effects` is row-major over the grid; inside-ROI patches hold +inf.
    """

    grid: PatchGrid
    roi: RoiRect
    effects: np.ndarray
    baseline_db: float
    model_info: dict
    config: dict
    inference_count: int
    degradation: DegradationSpec | None = None
    input_info: dict = field(default_factory=dict)
    gt_info: dict = field(default_factory=dict)
    sensitive_count: int | None = None
    unrelated_count: int | None = None
    per_patch_interventions: np.ndarray | None = None
    stats: dict | None = None

    @property
    def roi_patch_mask(self) -> np.ndarray:
        return np.isinf(self.effects)

    @property
    def finite_effects(self) -> np.ndarray:
        return self.effects[~self.roi_patch_mask]


def partition_rule(diffs: np.ndarray, tau: float) -> bool:
    """True when a patch is unrelated: every coarse deviation below tau.

    The comparison is strict, so a deviation of exactly tau keeps the patch
    sensitive.
    """
    return bool(np.max(np.abs(diffs)) < tau)


def inference_count(config: EngineConfig, n_outside: int, sensitive_count: int = 0) -> int:
    """Model-inference budget: baseline plus the per-mode schedule."""
    if config.mode == "full":
        return 1 + n_outside * config.T
    return 1 + n_outside * config.C + sensitive_count * config.F


def _buffer_hash(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()


def baseline_metric(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    cache: dict | None = None,
) -> float:
    """ROI PSNR of the model output on the unintervened input (M_o)."""
    want = (input_image.height * model.scale, input_image.width * model.scale, input_image.channels)
    if gt.data.shape != want:
        raise ValueError(f"ground truth shape {gt.data.shape}, expected {want}")
    if not roi.inside(gt.height, gt.width):
        raise ValueError(f"roi {roi} outside output bounds {gt.height}x{gt.width}")
    if cache is not None:
        key = (model.name, model.backend, _buffer_hash(input_image.data))
        out = cache.get(key)
        if out is None:
            out = model.run(input_image.data)
            cache[key] = out
    else:
        out = model.run(input_image.data)
    return mse_to_psnr(region_mse(out, gt.data, roi))


def intervene(
    input_image: ImageBuffer,
    grid: PatchGrid,
    roi_patches: frozenset[int],
    patch_index: int,
    library_patch: ImageBuffer,
) -> ImageBuffer:
    """Replace one grid cell's content; rejects inside-ROI indices."""
    if patch_index in roi_patches:
        raise ValueError(f"patch {patch_index} overlaps the ROI footprint")
    from .imaging import paste_patch

    return paste_patch(input_image, grid.rect(patch_index), library_patch)


# --------------------------------------------------------------------------
# Core per-patch loop and its parallel scheduling


@dataclass
class _RunContext:
    model: ModelHandle
    input_arr: np.ndarray
    gt_arr: np.ndarray
    roi: RoiRect
    grid: PatchGrid
    library: InterventionLibrary
    density: GradientDensity
    baseline: float
    seed: int


def _diffs_for_node(
    ctx: _RunContext,
    node: StreamNode,
    patch_index: int,
    n: int,
    sampling_mode: str,
    exhaustive: bool = False,
) -> np.ndarray:
    """n values of (baseline - post-intervention ROI PSNR) for one patch."""
    rect = ctx.grid.rect(patch_index)
    ys, ye = rect.y, rect.y + rect.h
    xs, xe = rect.x, rect.x + rect.w
    work = ctx.input_arr.copy()
    pool = ctx.library.pool
    diffs = np.empty(n, dtype=np.float64)
    for t in range(n):
        if exhaustive:
            idx = t
        else:
            gen = node.child(t).generator()
            idx, _ = sample_patch(ctx.library, ctx.density, sampling_mode, gen)
        work[ys:ye, xs:xe] = pool[idx]
        out = ctx.model.run(work)
        diffs[t] = ctx.baseline - mse_to_psnr(region_mse(out, ctx.gt_arr, ctx.roi))
    return diffs


def _execute_task(ctx: _RunContext, task: tuple) -> tuple[int, np.ndarray]:
    stage, patch_index, n, sampling_mode, keep_diffs = task
    node = StreamNode(ctx.seed, (stage, patch_index))
    diffs = _diffs_for_node(ctx, node, patch_index, n, sampling_mode)
    if keep_diffs:
        return patch_index, diffs
    return patch_index, np.array([np.mean(diffs)])


_WORKER_CTX: _RunContext | None = None


def _init_worker(ctx: _RunContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_in_worker(task: tuple) -> tuple[int, np.ndarray]:
    return _execute_task(_WORKER_CTX, task)


def _map_tasks(ctx: _RunContext, tasks: list[tuple], workers: int) -> list[tuple[int, np.ndarray]]:
    """Run per-patch tasks, serially or on a pool; results keyed by patch.

    Each task is self-contained (its streams are derived from the task's
    own ids), so any schedule produces identical numbers.
    """
    if workers <= 1 or len(tasks) <= 1:
        return [_execute_task(ctx, task) for task in tasks]
    if ctx.model.backend == "subprocess":
        ensure = getattr(ctx.model.runner, "ensure_pool", None)
        if ensure is not None and ctx.model.concurrent_safe:
            ensure(workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda t: _execute_task(ctx, t), tasks))
    chunk = max(1, len(tasks) // (workers * 4))
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_init_worker, initargs=(ctx,)
    ) as pool:
        return list(pool.map(_run_in_worker, tasks, chunksize=chunk))


def _prepare(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    config: EngineConfig,
    cache: dict | None,
) -> tuple[_RunContext, frozenset[int], list[int]]:
    if library.patch_size != config.patch_size:
        raise ValueError(
            f"library patch size {library.patch_size} != configured {config.patch_size}"
        )
    if library.channels != input_image.channels:
        raise ValueError(
            f"library channels {library.channels} != input channels {input_image.channels}"
        )
    grid = build_patch_grid(input_image.height, input_image.width, config.patch_size)
    _, roi_patches = roi_input_footprint(roi, model.scale, grid)
    baseline = baseline_metric(model, input_image, gt, roi, cache)
    ctx = _RunContext(
        model=model,
        input_arr=input_image.data,
        gt_arr=gt.data,
        roi=roi,
        grid=grid,
        library=library,
        density=library.density,
        baseline=baseline,
        seed=config.seed,
    )
    outside = [i for i in range(grid.n) if i not in roi_patches]
    return ctx, roi_patches, outside


def ate_for_patch(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    patch_index: int,
    n_interventions: int,
    stream: StreamNode,
    sampling: str = "density",
    baseline: float | None = None,
    exhaustive: bool = False,
) -> float:
    """Average treatment effect of one patch on the ROI metric, in dB.

    Runs n inferences on intervened inputs (plus one baseline inference
    when `baseline` is not supplied) and averages the per-intervention
    metric drops. `exhaustive` enumerates pool indices 0..n-1 instead of
    sampling, which with n = pool size gives the exact pool mean.
    """
    if n_interventions < 1:
        raise ValueError("need at least one intervention")
    grid = build_patch_grid(input_image.height, input_image.width, library.patch_size)
    _, roi_patches = roi_input_footprint(roi, model.scale, grid)
    if patch_index in roi_patches:
        raise ValueError(f"patch {patch_index} overlaps the ROI footprint")
    if exhaustive and n_interventions > library.size:
        raise ValueError("exhaustive enumeration cannot exceed the pool size")
    if baseline is None:
        baseline = baseline_metric(model, input_image, gt, roi)
    ctx = _RunContext(
        model=model,
        input_arr=input_image.data,
        gt_arr=gt.data,
        roi=roi,
        grid=grid,
        library=library,
        density=library.density,
        baseline=baseline,
        seed=stream.seed,
    )
    diffs = _diffs_for_node(ctx, stream, patch_index, n_interventions, sampling, exhaustive)
    return float(np.mean(diffs))


def convergence_trace(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    patch_index: int,
    T: int,
    stream: StreamNode,
    sampling: str = "density",
    baseline: float | None = None,
) -> np.ndarray:
    """Running-mean effect after 1..T interventions for one patch.

    The last element is bit-identical to ate_for_patch with the same
    stream.
    """
    if T < 2:
        raise ValueError("need T >= 2 for a trace")
    grid = build_patch_grid(input_image.height, input_image.width, library.patch_size)
    _, roi_patches = roi_input_footprint(roi, model.scale, grid)
    if patch_index in roi_patches:
        raise ValueError(f"patch {patch_index} overlaps the ROI footprint")
    if baseline is None:
        baseline = baseline_metric(model, input_image, gt, roi)
    ctx = _RunContext(
        model=model,
        input_arr=input_image.data,
        gt_arr=gt.data,
        roi=roi,
        grid=grid,
        library=library,
        density=library.density,
        baseline=baseline,
        seed=stream.seed,
    )
    diffs = _diffs_for_node(ctx, stream, patch_index, T, sampling)
    return np.array([np.mean(diffs[:k]) for k in range(1, T + 1)])


def _finish_map(
    ctx: _RunContext,
    config: EngineConfig,
    roi_patches: frozenset[int],
    effects: np.ndarray,
    per_patch: np.ndarray,
    inferences: int,
    model: ModelHandle,
    degradation: DegradationSpec | None,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    input_info: dict | None,
    gt_info: dict | None,
    sensitive_count: int | None,
    unrelated_count: int | None,
) -> CausalEffectMap:
    iinfo = {
        "path": None,
        "hash": _buffer_hash(input_image.data),
        "height": input_image.height,
        "width": input_image.width,
    }
    if input_info:
        iinfo.update(input_info)
    ginfo = {"path": None, "hash": _buffer_hash(gt.data)}
    if gt_info:
        ginfo.update(gt_info)
    cem = CausalEffectMap(
        grid=ctx.grid,
        roi=ctx.roi,
        effects=effects,
        baseline_db=ctx.baseline,
        model_info={
            "name": model.name,
            "task": model.task,
            "scale": model.scale,
            "backend": model.backend,
        },
        config={
            "mode": config.mode,
            "T": config.T,
            "C": config.C,
            "F": config.F,
            "tau": config.tau,
            "sampling": config.sampling,
            "coarse_sampling": config.effective_coarse_sampling,
            "seed": config.seed,
        },
        inference_count=inferences,
        degradation=degradation,
        input_info=iinfo,
        gt_info=ginfo,
        sensitive_count=sensitive_count,
        unrelated_count=unrelated_count,
        per_patch_interventions=per_patch,
    )
    from .reporting import classify_effects

    stats = classify_effects(cem, config.effective_epsilon)
    cem.stats = {
        "positive_pct": stats.positive_pct,
        "negative_pct": stats.negative_pct,
        "none_pct": stats.none_pct,
        "range_min_db": stats.range_min_db,
        "range_max_db": stats.range_max_db,
        "epsilon_db": stats.epsilon,
    }
    return cem


def compute_cem_full(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    config: EngineConfig,
    degradation: DegradationSpec | None = None,
    input_info: dict | None = None,
    gt_info: dict | None = None,
    cache: dict | None = None,
) -> CausalEffectMap:
    """T interventions for every patch outside the ROI footprint."""
    if config.mode != "full":
        raise ValueError("config.mode must be 'full'")
    ctx, roi_patches, outside = _prepare(model, input_image, gt, roi, library, config, cache)
    tasks = [(STAGE_FULL, i, config.T, config.sampling, False) for i in outside]
    results = _map_tasks(ctx, tasks, config.workers)
    effects = np.full(ctx.grid.n, np.inf, dtype=np.float64)
    per_patch = np.zeros(ctx.grid.n, dtype=np.int64)
    for i, value in results:
        effects[i] = value[0]
        per_patch[i] = config.T
    inferences = inference_count(config, len(outside))
    deg = degradation if degradation is not None else library.degradation
    return _finish_map(
        ctx, config, roi_patches, effects, per_patch, inferences, model, deg,
        input_image, gt, input_info, gt_info, None, None,
    )


def _coarse_phase(
    ctx: _RunContext, outside: list[int], config: EngineConfig
) -> dict[int, np.ndarray]:
    mode = config.effective_coarse_sampling
    tasks = [(STAGE_COARSE, i, config.C, mode, True) for i in outside]
    return dict(_map_tasks(ctx, tasks, config.workers))


def coarse_partition(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    config: EngineConfig,
    cache: dict | None = None,
) -> CoarsePartition:
    """Split outside patches into unrelated / sensitive with C probes each."""
    ctx, roi_patches, outside = _prepare(model, input_image, gt, roi, library, config, cache)
    coarse = _coarse_phase(ctx, outside, config)
    unrelated = frozenset(i for i in outside if partition_rule(coarse[i], config.tau))
    sensitive = frozenset(outside) - unrelated
    return CoarsePartition(
        unrelated=unrelated,
        sensitive=sensitive,
        roi_patches=roi_patches,
        coarse_diffs=coarse,
    )


def compute_cem_fast(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    config: EngineConfig,
    degradation: DegradationSpec | None = None,
    input_info: dict | None = None,
    gt_info: dict | None = None,
    cache: dict | None = None,
) -> CausalEffectMap:
    """Coarse-to-fine schedule: C probes everywhere, F refinements on the
    sensitive set, coarse samples reused for the unrelated set."""
    if config.mode != "fast":
        raise ValueError("config.mode must be 'fast'")
    ctx, roi_patches, outside = _prepare(model, input_image, gt, roi, library, config, cache)
    coarse = _coarse_phase(ctx, outside, config)
    unrelated = frozenset(i for i in outside if partition_rule(coarse[i], config.tau))
    sensitive = sorted(frozenset(outside) - unrelated)

    fine_tasks = [(STAGE_FINE, i, config.F, config.sampling, False) for i in sensitive]
    fine = dict(_map_tasks(ctx, fine_tasks, config.workers))

    effects = np.full(ctx.grid.n, np.inf, dtype=np.float64)
    per_patch = np.zeros(ctx.grid.n, dtype=np.int64)
    for i in unrelated:
        effects[i] = float(np.mean(coarse[i]))
        per_patch[i] = config.C
    for i in sensitive:
        effects[i] = fine[i][0]
        per_patch[i] = config.C + config.F
    inferences = inference_count(config, len(outside), len(sensitive))
    deg = degradation if degradation is not None else library.degradation
    return _finish_map(
        ctx, config, roi_patches, effects, per_patch, inferences, model, deg,
        input_image, gt, input_info, gt_info, len(sensitive), len(unrelated),
    )


def compute_cem(
    model: ModelHandle,
    input_image: ImageBuffer,
    gt: ImageBuffer,
    roi: RoiRect,
    library: InterventionLibrary,
    config: EngineConfig,
    **kwargs,
) -> CausalEffectMap:
    fn = compute_cem_full if config.mode == "full" else compute_cem_fast
    return fn(model, input_image, gt, roi, library, config, **kwargs)


def similarity_score(reference: CausalEffectMap, candidate: CausalEffectMap) -> float:
    """Percent agreement: 100 minus the l1 gap over the reference l1 norm.

    ROI-sentinel patches are excluded from both norms. Can be negative for
    badly disagreeing maps.
    """
    if reference.grid != candidate.grid:
        raise ValueError("grids differ")
    if reference.roi != candidate.roi:
        raise ValueError("ROIs differ")
    ref_mask = reference.roi_patch_mask
    if not np.array_equal(ref_mask, candidate.roi_patch_mask):
        raise ValueError("ROI sentinel patches differ")
    phi = reference.effects[~ref_mask]
    phi_c = candidate.effects[~ref_mask]
    l1_ref = float(np.sum(np.abs(phi)))
    l1_diff = float(np.sum(np.abs(phi_c - phi)))
    if l1_ref == 0.0:
        return 100.0 if l1_diff == 0.0 else 0.0
    return 100.0 * (1.0 - l1_diff / l1_ref)


# --------------------------------------------------------------------------
# Serialization (the cem.json interchange format)


def cem_to_dict(cem: CausalEffectMap) -> dict:
    effects = [None if np.isinf(v) else float(v) for v in cem.effects]
    return {
        "version": CEM_VERSION,
        "model": cem.model_info,
        "input": cem.input_info,
        "gt": cem.gt_info,
        "degradation": cem.degradation.to_json() if cem.degradation else None,
        "roi": {"x": cem.roi.x, "y": cem.roi.y, "w": cem.roi.w, "h": cem.roi.h},
        "patch_size": cem.grid.patch_size,
        "grid": {"rows": cem.grid.rows, "cols": cem.grid.cols},
        "baseline_db": cem.baseline_db,
        "effects": effects,
        "roi_sentinel": ROI_SENTINEL_NOTE,
        "config": cem.config,
        "counts": {
            "inferences": cem.inference_count,
            "sensitive": cem.sensitive_count,
            "unrelated": cem.unrelated_count,
        },
        "stats": cem.stats,
    }


def cem_from_dict(obj: dict) -> CausalEffectMap:
    if obj.get("version") != CEM_VERSION:
        raise ValueError(f"unsupported cem version {obj.get('version')}")
    grid = PatchGrid(obj["patch_size"], obj["grid"]["rows"], obj["grid"]["cols"])
    roi = RoiRect(**obj["roi"])
    effects = np.array(
        [np.inf if v is None else float(v) for v in obj["effects"]], dtype=np.float64
    )
    if len(effects) != grid.n:
        raise ValueError(f"{len(effects)} effects for a {grid.rows}x{grid.cols} grid")
    deg = obj.get("degradation")
    return CausalEffectMap(
        grid=grid,
        roi=roi,
        effects=effects,
        baseline_db=float(obj["baseline_db"]),
        model_info=obj["model"],
        config=obj["config"],
        inference_count=int(obj["counts"]["inferences"]),
        degradation=DegradationSpec.from_json(deg) if deg else None,
        input_info=obj.get("input", {}),
        gt_info=obj.get("gt", {}),
        sensitive_count=obj["counts"].get("sensitive"),
        unrelated_count=obj["counts"].get("unrelated"),
        stats=obj.get("stats"),
    )


def save_cem(cem: CausalEffectMap, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(cem_to_dict(cem), f, indent=1)
        f.write("\n")


def load_cem(path: str | os.PathLike) -> CausalEffectMap:
    with open(path) as f:
        return cem_from_dict(json.load(f))
