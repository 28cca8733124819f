"""Command-line surface: library building, CEM runs, compare, render, report.

Every artifact-producing command writes a manifest.json next to its output
recording the resolved configuration, input hashes, and inference count, so
any result can be reproduced from its manifest alone.
"""

from __future__ import annotations

import argparse
import glob as globmod
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .degradations import DegradationSpec, RainParams
from .engine import (
    EngineConfig,
    compute_cem,
    load_cem,
    save_cem,
    similarity_score,
)
from .imaging import ImageBuffer, RoiRect, read_image
from .library import build_library, load_library, save_library
from .models import parse_model_spec
from .reporting import export_report, render_heatmap

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_seed() -> int:
    return int(os.environ.get("CEM_SEED", "0"))


def _parse_range(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"expected LO,HI range, got {text!r}")
    lo, hi = float(parts[0]), float(parts[1])
    if hi < lo:
        raise UsageError(f"range {text!r} has hi < lo")
    return lo, hi


def _parse_roi(text: str) -> RoiRect:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"expected X,Y,W,H for --roi, got {text!r}")
    try:
        return RoiRect(*(int(p) for p in parts))
    except ValueError as exc:
        raise UsageError(f"bad --roi: {exc}") from exc


def _write_manifest(path: Path, argv: list[str], config: dict, hashes: dict,
                    wall_clock_s: float, inferences: int | None) -> None:
    manifest = {
        "command": argv,
        "config": config,
        "hashes": hashes,
        "tool_version": __version__,
        "wall_clock_s": wall_clock_s,
        "inference_count": inferences,
    }
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def _crop_to_multiple(img: ImageBuffer, multiple: int, scale: int = 1) -> ImageBuffer:
    h = (img.height // (multiple * scale)) * multiple * scale
    w = (img.width // (multiple * scale)) * multiple * scale
    if h == 0 or w == 0:
        raise UsageError(f"image {img.height}x{img.width} smaller than one patch")
    if (h, w) == (img.height, img.width):
        return img
    return ImageBuffer._wrap(img.data[:h, :w].copy())


def _cmd_library_build(args, argv) -> int:
    if args.task == "sr":
        spec = DegradationSpec.sr(args.scale)
    elif args.task == "dn":
        spec = DegradationSpec.dn(args.sigma)
    else:
        spec = DegradationSpec.dr(
            RainParams(
                density_per_megapixel=args.rain_density,
                length_px=_parse_range(args.rain_length),
                width_px=_parse_range(args.rain_width),
                angle_deg=_parse_range(args.rain_angle),
                intensity=_parse_range(args.rain_intensity),
            )
        )
    t0 = time.monotonic()
    lib = build_library(args.images, spec, args.patch_size, args.pool, args.seed)
    save_library(lib, args.out)
    _write_manifest(
        Path(args.out) / "build-manifest.json",
        argv,
        {
            "task": args.task,
            "degradation": spec.to_json(),
            "patch_size": args.patch_size,
            "pool": args.pool,
            "seed": args.seed,
        },
        {"library": _file_hash(Path(args.out) / "manifest.json")},
        time.monotonic() - t0,
        None,
    )
    print(f"built library: {lib.size} patches from {len(lib.sources)} images -> {args.out}")
    return EXIT_OK


def _cmd_run(args, argv) -> int:
    roi = _parse_roi(args.roi)
    t0 = time.monotonic()
    library = load_library(args.library)
    model = parse_model_spec(args.model)
    try:
        input_image = read_image(args.input)
        gt = read_image(args.gt)
        if args.crop_to_multiple:
            input_image = _crop_to_multiple(input_image, args.patch_size)
            gt = _crop_to_multiple(gt, args.patch_size, model.scale)
        if input_image.height % args.patch_size or input_image.width % args.patch_size:
            raise UsageError(
                f"input {input_image.height}x{input_image.width} not divisible by "
                f"patch size {args.patch_size}; pass --crop-to-multiple"
            )
        config = EngineConfig(
            T=args.T,
            C=args.C,
            F=args.F,
            tau=args.tau,
            patch_size=args.patch_size,
            mode=args.mode,
            sampling=args.sampling,
            coarse_sampling=args.coarse_sampling,
            seed=args.seed,
            workers=args.workers,
            epsilon_classify=args.epsilon,
        )
        cem = compute_cem(
            model,
            input_image,
            gt,
            roi,
            library,
            config,
            input_info={
                "path": str(args.input),
                "hash": _file_hash(args.input),
                "height": input_image.height,
                "width": input_image.width,
            },
            gt_info={"path": str(args.gt), "hash": _file_hash(args.gt)},
        )
    finally:
        model.close()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_cem(cem, out_dir / "cem.json")
    render_heatmap(cem, input_image, out_dir / "heatmap.png", upscale=args.upscale)
    _write_manifest(
        out_dir / "manifest.json",
        argv,
        dict(cem.config, workers=args.workers, patch_size=args.patch_size),
        {
            "input": _file_hash(args.input),
            "gt": _file_hash(args.gt),
            "library": _file_hash(Path(args.library) / "manifest.json"),
        },
        time.monotonic() - t0,
        cem.inference_count,
    )
    print(
        f"cem: baseline {cem.baseline_db:.3f} dB, {cem.inference_count} inferences "
        f"-> {out_dir / 'cem.json'}"
    )
    return EXIT_OK


def _cmd_compare(args, argv) -> int:
    a = load_cem(args.a)
    b = load_cem(args.b)
    print(f"{similarity_score(a, b):.2f}%")
    return EXIT_OK


def _cmd_render(args, argv) -> int:
    cem = load_cem(args.cem)
    img = read_image(args.input)
    render_heatmap(cem, img, args.out, upscale=args.upscale)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_report(args, argv) -> int:
    paths = sorted(globmod.glob(args.glob, recursive=True))
    if not paths:
        raise UsageError(f"no files match {args.glob!r}")
    export_report(paths, args.out, args.format)
    print(f"wrote {args.out} ({len(paths)} maps)")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="cemkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    lib = sub.add_parser("library", help="intervention library operations")
    lib_sub = lib.add_subparsers(dest="library_command", required=True)
    build = lib_sub.add_parser("build", help="build a patch library from images")
    build.add_argument("--images", required=True, help="directory of source PNGs")
    build.add_argument("--task", required=True, choices=["sr", "dn", "dr"])
    build.add_argument("--scale", type=int, default=4, help="sr downsampling factor")
    build.add_argument("--sigma", type=float, default=50.0, help="dn noise level (8-bit)")
    build.add_argument("--rain-density", type=float, default=150.0,
                       help="dr streaks per megapixel")
    build.add_argument("--rain-length", default="20,40", help="dr streak length LO,HI px")
    build.add_argument("--rain-width", default="1,2", help="dr streak width LO,HI px")
    build.add_argument("--rain-angle", default="70,110", help="dr streak angle LO,HI deg")
    build.add_argument("--rain-intensity", default="0.2,0.5", help="dr streak intensity LO,HI")
    build.add_argument("--patch-size", type=int, default=8)
    build.add_argument("--pool", type=int, default=20000)
    build.add_argument("--seed", type=int, default=_default_seed())
    build.add_argument("--out", required=True)
    build.set_defaults(func=_cmd_library_build)

    run = sub.add_parser("run", help="compute a causal effect map")
    run.add_argument("--model", required=True,
                     help="builtin:NAME[:PARAM] | subprocess:\"CMD\" | onnx:FILE")
    run.add_argument("--input", required=True, help="degraded input PNG")
    run.add_argument("--gt", required=True, help="ground-truth PNG (output scale)")
    run.add_argument("--roi", required=True, help="X,Y,W,H in output coordinates")
    run.add_argument("--library", required=True, help="library directory")
    run.add_argument("--mode", choices=["full", "fast"], default="fast")
    run.add_argument("--T", type=int, default=500)
    run.add_argument("--C", type=int, default=3)
    run.add_argument("--F", type=int, default=50)
    run.add_argument("--tau", type=float, default=0.01)
    run.add_argument("--patch-size", type=int, default=8)
    run.add_argument("--sampling", choices=["density", "uniform"], default="density")
    run.add_argument("--coarse-sampling", choices=["density", "uniform"], default=None)
    run.add_argument("--epsilon", type=float, default=None,
                     help="classification threshold in dB (default: tau)")
    run.add_argument("--seed", type=int, default=_default_seed())
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--upscale", type=int, default=4, help="heatmap display factor")
    run.add_argument("--crop-to-multiple", action="store_true",
                     help="crop input and gt to a patch-size multiple first")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="similarity score of two maps")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    cmp_.set_defaults(func=_cmd_compare)

    render = sub.add_parser("render", help="render a heatmap overlay")
    render.add_argument("--cem", required=True)
    render.add_argument("--input", required=True)
    render.add_argument("--out", required=True)
    render.add_argument("--upscale", type=int, default=4)
    render.set_defaults(func=_cmd_render)

    report = sub.add_parser("report", help="tabulate statistics over maps")
    report.add_argument("--glob", required=True, help="glob pattern of cem.json files")
    report.add_argument("--out", required=True)
    report.add_argument("--format", choices=["csv", "json"], default="csv")
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())
