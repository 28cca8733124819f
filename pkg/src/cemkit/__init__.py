"""cemkit: black-box causal attribution for image restoration models.

Computes per-patch causal effect maps: for each patch of a degraded input
image, the average treatment effect of replacing that patch (with
degradation-matched natural patches) on the reconstruction quality of a
chosen output region.
"""

__version__ = "0.1.0"

from .degradations import DegradationSpec, RainParams, degrade_dn, degrade_dr, degrade_sr
from .engine import (
    CausalEffectMap,
    CoarsePartition,
    EngineConfig,
    ate_for_patch,
    baseline_metric,
    coarse_partition,
    compute_cem,
    compute_cem_fast,
    compute_cem_full,
    convergence_trace,
    inference_count,
    intervene,
    load_cem,
    save_cem,
    similarity_score,
)
from .imaging import (
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
from .library import (
    GradientDensity,
    InterventionLibrary,
    build_library,
    estimate_density,
    load_library,
    sample_patch,
    save_library,
)
from .models import (
    ModelHandle,
    infer,
    load_onnx_model,
    make_builtin,
    parse_model_spec,
    spawn_subprocess_model,
)
from .reporting import (
    EffectStats,
    aggregate_stats,
    classify_effects,
    export_report,
    render_heatmap,
)
from .streams import StreamNode
