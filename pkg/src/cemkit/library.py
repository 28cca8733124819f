"""Intervention patch library: degradation-matched patches plus sampling.

Patches are cropped from fully degraded source images (never degraded in
isolation), so spatially correlated degradations like rain streaks stay
consistent across patch borders. A gradient histogram over the pool drives
density-weighted sampling in the fine stage.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degradations import DegradationSpec
from .imaging import ImageBuffer, gradient_magnitude, read_image
from .streams import STAGE_LIBRARY, StreamNode

LIBRARY_VERSION = 1
DEFAULT_BINS = 32
DEFAULT_POOL_SIZE = 20000

_SUB_COUNTS = 0
_SUB_DEGRADE = 1
_SUB_CROP = 2


def _sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class GradientDensity:
    """Equal-population histogram over patch gradient magnitudes.

    bin i covers (edges[i], edges[i+1]]; masses are member counts over the
    pool size; members lists every pool index of the bin.
    """

    edges: np.ndarray
    masses: np.ndarray
    members: list[np.ndarray]
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._cum = np.cumsum(self.masses)

    @property
    def bins(self) -> int:
        return len(self.masses)

    def bin_of(self, g: float) -> int:
        return int(np.searchsorted(self.edges[1:-1], g, side="right"))


@dataclass
class InterventionLibrary:
    """Pool of degradation-matched patches with gradient statistics.

    pool has shape (n, patch_size, patch_size, channels), float32 (the
    on-disk sample format). provenance rows are (source index, y, x) crop
    origins in degraded-image coordinates.
    """

    patch_size: int
    channels: int
    pool: np.ndarray
    g_values: np.ndarray
    degradation: DegradationSpec
    sources: list[tuple[str, str]]
    seed: int
    provenance: np.ndarray
    _density: GradientDensity | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.pool) != len(self.g_values) or len(self.pool) < 1:
            raise ValueError("pool and g_values must be non-empty and equal length")
        self.pool.flags.writeable = False
        self.g_values.flags.writeable = False

    @property
    def size(self) -> int:
        return len(self.pool)

    def patch(self, index: int) -> ImageBuffer:
        return ImageBuffer._wrap(self.pool[index])

    @property
    def density(self) -> GradientDensity:
        if self._density is None:
            self._density = estimate_density(self)
        return self._density

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, InterventionLibrary)
            and self.patch_size == other.patch_size
            and self.channels == other.channels
            and self.seed == other.seed
            and self.degradation == other.degradation
            and self.sources == other.sources
            and np.array_equal(self.pool, other.pool)
            and np.array_equal(self.g_values, other.g_values)
            and np.array_equal(self.provenance, other.provenance)
        )


def build_library(
    image_dir: str | os.PathLike,
    degradation: DegradationSpec,
    patch_size: int = 8,
    pool_size: int = DEFAULT_POOL_SIZE,
    seed: int = 0,
) -> InterventionLibrary:
    """Degrade every source image, then crop `pool_size` random windows.

    Crop counts per image are multinomial-uniform; window positions come
    from per-image derived streams, and sources are ordered by content hash,
    so the pool is independent of directory listing order and of any build
    parallelism.
    """
    if patch_size < 2:
        raise ValueError("patch size must be >= 2")
    if pool_size < 1:
        raise ValueError("pool size must be >= 1")
    root = Path(image_dir)
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise ValueError(f"no readable images in {image_dir}")
    hashed = sorted(((_sha256_file(p), p) for p in paths), key=lambda t: t[0])

    node = StreamNode(seed)
    counts = (
        node.child(STAGE_LIBRARY, _SUB_COUNTS)
        .generator()
        .multinomial(pool_size, np.full(len(hashed), 1.0 / len(hashed)))
    )

    pool = np.empty((pool_size, patch_size, patch_size, 0), dtype=np.float32)
    patches: list[np.ndarray] = []
    g_values = np.empty(pool_size, dtype=np.float64)
    provenance = np.empty((pool_size, 3), dtype=np.int64)
    channels: int | None = None
    out = 0
    for i, (digest, path) in enumerate(hashed):
        img = read_image(path)
        if channels is None:
            channels = img.channels
        elif img.channels != channels:
            raise ValueError(
                f"{path} has {img.channels} channels, expected {channels}; "
                "library sources must agree"
            )
        degraded = degradation.apply(
            img, node.child(STAGE_LIBRARY, _SUB_DEGRADE, i).generator()
        )
        dh, dw = degraded.height, degraded.width
        if dh < patch_size or dw < patch_size:
            raise ValueError(
                f"{path} is {dh}x{dw} after degradation, smaller than patch size {patch_size}"
            )
        crop_rng = node.child(STAGE_LIBRARY, _SUB_CROP, i).generator()
        for _ in range(int(counts[i])):
            y = int(crop_rng.integers(0, dh - patch_size + 1))
            x = int(crop_rng.integers(0, dw - patch_size + 1))
            window = degraded.data[y : y + patch_size, x : x + patch_size].astype(np.float32)
            patches.append(window)
            g_values[out] = gradient_magnitude(ImageBuffer._wrap(window))
            provenance[out] = (i, y, x)
            out += 1
    pool = np.stack(patches).astype(np.float32)
    return InterventionLibrary(
        patch_size=patch_size,
        channels=int(channels),
        pool=pool,
        g_values=g_values,
        degradation=degradation,
        sources=[(str(p), digest) for digest, p in hashed],
        seed=int(seed),
        provenance=provenance,
    )


def estimate_density(library: InterventionLibrary, bins: int = DEFAULT_BINS) -> GradientDensity:
    """Quantile-binned histogram of the pool's gradient magnitudes."""
    g = library.g_values
    edges = np.quantile(g, np.linspace(0.0, 1.0, bins + 1))
    assignment = np.searchsorted(edges[1:-1], g, side="right")
    masses = np.bincount(assignment, minlength=bins).astype(np.float64) / len(g)
    members = [np.flatnonzero(assignment == b) for b in range(bins)]
    return GradientDensity(edges=edges, masses=masses, members=members)


def sample_patch(
    library: InterventionLibrary,
    density: GradientDensity,
    mode: str,
    rng: np.random.Generator,
) -> tuple[int, ImageBuffer]:
    """Draw one intervention patch.

    `density` mode draws a histogram bin by mass, then a member uniformly
    within it; `uniform` draws a pool index uniformly.
    """
    if mode == "uniform":
        idx = int(rng.integers(0, library.size))
    elif mode == "density":
        u = rng.random()
        b = min(int(np.searchsorted(density._cum, u, side="right")), density.bins - 1)
        members = density.members[b]
        idx = int(members[rng.integers(0, len(members))])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return idx, library.patch(idx)


def save_library(library: InterventionLibrary, path: str | os.PathLike) -> None:
    """Write the single-directory container: manifest.json, pool.bin, g.bin."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    pool_bytes = np.ascontiguousarray(library.pool, dtype="<f4").tobytes()
    g_bytes = np.ascontiguousarray(library.g_values, dtype="<f8").tobytes()
    (root / "pool.bin").write_bytes(pool_bytes)
    (root / "g.bin").write_bytes(g_bytes)
    density = library.density
    manifest = {
        "version": LIBRARY_VERSION,
        "patch_size": library.patch_size,
        "channels": library.channels,
        "pool_count": library.size,
        "degradation": library.degradation.to_json(),
        "seed": library.seed,
        "bin_edges": density.edges.tolist(),
        "bin_masses": density.masses.tolist(),
        "sources": [[p, h] for p, h in library.sources],
        "provenance": library.provenance.tolist(),
        "checksums": {
            "pool.bin": _sha256_bytes(pool_bytes),
            "g.bin": _sha256_bytes(g_bytes),
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_library(path: str | os.PathLike) -> InterventionLibrary:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != LIBRARY_VERSION:
        raise ValueError(
            f"library version {manifest.get('version')} unsupported "
            f"(expected {LIBRARY_VERSION})"
        )
    pool_bytes = (root / "pool.bin").read_bytes()
    g_bytes = (root / "g.bin").read_bytes()
    for name, blob in (("pool.bin", pool_bytes), ("g.bin", g_bytes)):
        want = manifest["checksums"][name]
        got = _sha256_bytes(blob)
        if got != want:
            raise ValueError(f"checksum mismatch for {name}: {got} != {want}")
    n = manifest["pool_count"]
    ps = manifest["patch_size"]
    ch = manifest["channels"]
    pool = np.frombuffer(pool_bytes, dtype="<f4").reshape(n, ps, ps, ch).copy()
    g = np.frombuffer(g_bytes, dtype="<f8").copy()
    if len(g) != n:
        raise ValueError(f"g.bin holds {len(g)} values, expected {n}")
    return InterventionLibrary(
        patch_size=ps,
        channels=ch,
        pool=pool,
        g_values=g,
        degradation=DegradationSpec.from_json(manifest["degradation"]),
        sources=[(p, h) for p, h in manifest["sources"]],
        seed=int(manifest["seed"]),
        provenance=np.asarray(manifest["provenance"], dtype=np.int64).reshape(n, 3),
    )
