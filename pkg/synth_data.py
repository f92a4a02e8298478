# synth_data.py - Deterministic synthetic voxel datasets
#
# Voronoi tessellations stand in for polycrystalline grain maps; analytic
# spheres, cuboids and ellipsoids give a labelled three-class shape set.
# A voxel (i, j, k) is sampled at its center (i + 0.5, j + 0.5, k + 0.5).

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

import matgan_logger as _mlog
from voxel_grid import LabeledVolume, VoxelGrid, extract_grain, load_grid, save_grid

logger = _mlog.get("synth")

SYNTH_PITCH = 1.0
PRIMITIVES = ("sphere", "cuboid", "ellipsoid")
KINDS = ("voronoi",) + PRIMITIVES + ("solids",)
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["file", "class", "kind", "seed", "params"]
MAX_TESSELLATIONS = 1000


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """
    kind: voronoi, sphere, cuboid, ellipsoid, or solids (the three primitives in turn).
    size: grid edge; for voronoi the edge of the tessellated domain.
    radius: primitive radius range as a fraction of `size`.
    aspect: ellipsoid/cuboid elongation range.
    center/extent: fixed primitive geometry in voxel units, overriding the random draw.
    points: fixed Voronoi seed coordinates, overriding `n_seeds`.
    """
    kind: str
    size: int = 16
    count: int = 1
    seed: int = 0
    n_seeds: int = 40
    grain_cube: int = 16
    radius: tuple = (0.18, 0.28)
    aspect: tuple = (1.5, 1.75)
    center: tuple = None
    extent: object = None
    points: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SynthSpecError(f"unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.size < 1 or self.count < 0 or self.grain_cube < 1:
            raise SynthSpecError(f"size and grain_cube must be positive, count non-negative: {self}")
        lo, hi = self.radius
        if not 0.0 < lo <= hi:
            raise SynthSpecError(f"radius range must satisfy 0 < lo <= hi, got {self.radius}")
        if not 1.0 <= self.aspect[0] <= self.aspect[1]:
            raise SynthSpecError(f"aspect range must satisfy 1 <= lo <= hi, got {self.aspect}")
        if self.extent is None and self.kind in PRIMITIVES + ("solids",) and hi * self.aspect[1] > 0.5:
            raise SynthSpecError(f"radius {hi} x aspect {self.aspect[1]} does not fit the grid")


# ========== VORONOI ==========
def _voxel_centers(size, axis0):
    j, k = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pts = np.stack([np.full(j.size, axis0), j.ravel(), k.ravel()], axis=1)
    return pts.astype(np.float64) + 0.5


def _seed_points(spec, rng):
    if spec.points is not None:
        return np.asarray(spec.points, dtype=np.float64).reshape(-1, 3)
    n_voxels = spec.size ** 3
    if not 1 <= spec.n_seeds <= n_voxels:
        raise SynthSpecError(f"n_seeds must lie in [1, {n_voxels}], got {spec.n_seeds}")
    flat = rng.choice(n_voxels, size=spec.n_seeds, replace=False)
    return np.stack(np.unravel_index(flat, (spec.size,) * 3), axis=1).astype(np.float64) + 0.5


def voronoi_grains(spec, rng=None):
    """Label every voxel with its nearest seed point; equal distances go to the lower seed index."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    seeds = _seed_points(spec, rng)
    if seeds.shape[0] == 0:
        raise SynthSpecError("voronoi_grains needs at least one seed point")
    if seeds.shape[0] > spec.size ** 3:
        raise SynthSpecError(f"{seeds.shape[0]} seed points exceed {spec.size ** 3} voxels")

    nearest = np.empty((spec.size,) * 3, dtype=np.int64)
    for i in range(spec.size):
        d = cdist(_voxel_centers(spec.size, i), seeds, metric="sqeuclidean")
        nearest[i] = np.argmin(d, axis=1).reshape(spec.size, spec.size)

    # seeds that own no voxel are dropped so ids stay contiguous
    _, compact = np.unique(nearest, return_inverse=True)
    labels = compact.reshape(nearest.shape) + 1
    volume = LabeledVolume(labels, pitch=SYNTH_PITCH)
    logger.debug(f"voronoi_grains: {seeds.shape[0]} seeds -> {volume.num_labels} grains in {spec.size}³")
    return volume


def _touches_boundary(volume, label):
    mask = volume.labels == label
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
                or mask[:, :, 0].any() or mask[:, :, -1].any())


def voronoi_grain_set(spec):
    """
    Interior grains from successive tessellations, each centered in a grain_cube³ volume.
    Returns [(grid, params)] of length spec.count.
    """
    out = []
    for t in range(MAX_TESSELLATIONS):
        if len(out) >= spec.count:
            break
        volume = voronoi_grains(spec, np.random.default_rng([spec.seed, t]))
        for label in range(1, volume.num_labels + 1):
            if len(out) >= spec.count:
                break
            if _touches_boundary(volume, label):
                continue
            try:
                grid = extract_grain(volume, label, spec.grain_cube)
            except ValueError:
                logger.debug(f"tessellation {t}: grain {label} exceeds {spec.grain_cube}³, skipped")
                continue
            out.append((grid, {"tessellation": t, "grain": label, "volume": grid.solid_count()}))
    if len(out) < spec.count:
        raise SynthSpecError(f"collected {len(out)} of {spec.count} interior grains "
                             f"after {MAX_TESSELLATIONS} tessellations")
    return out


# ========== PRIMITIVES ==========
def _semi_axes(kind, extent):
    ext = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,)).copy()
    if kind == "sphere" and np.ptp(ext) != 0:
        raise SynthSpecError(f"sphere needs a single radius, got {extent}")
    if np.any(ext <= 0) or not np.all(np.isfinite(ext)):
        raise SynthSpecError(f"{kind} extent must be positive, got {extent}")
    return ext


def rasterize(kind, size, center, extent):
    """Solid where the voxel center satisfies the shape inequality."""
    if kind not in PRIMITIVES:
        raise SynthSpecError(f"unknown primitive {kind!r}")
    axes = _semi_axes(kind, extent)
    c = np.asarray(center, dtype=np.float64)
    if np.any(c - axes < 0.0) or np.any(c + axes > size):
        raise SynthSpecError(f"{kind} at {tuple(c)} with extent {tuple(axes)} does not fit a {size}³ grid")
    g = np.arange(size, dtype=np.float64) + 0.5
    dx = (g - c[0])[:, None, None] / axes[0]
    dy = (g - c[1])[None, :, None] / axes[1]
    dz = (g - c[2])[None, None, :] / axes[2]
    if kind == "cuboid":
        solid = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0) & (np.abs(dz) <= 1.0)
    else:
        solid = dx * dx + dy * dy + dz * dz <= 1.0
    return VoxelGrid(solid.astype(np.float32), pitch=SYNTH_PITCH)


def _draw_geometry(kind, spec, rng):
    r = rng.uniform(*spec.radius) * spec.size
    if kind == "sphere":
        axes = np.full(3, r)
    elif kind == "ellipsoid":
        axes = np.array([r * rng.uniform(*spec.aspect), r, r])[rng.permutation(3)]
    else:
        axes = r * np.array([1.0, rng.uniform(*spec.aspect), rng.uniform(1.0, spec.aspect[0])])
        axes = axes[rng.permutation(3)]
    slack = np.floor(spec.size / 2.0 - axes).clip(min=0)
    offset = np.array([rng.integers(-s, s + 1) for s in slack.astype(np.int64)])
    return spec.size / 2.0 + offset, axes


def primitive_solid(spec, rng=None):
    """One sphere, cuboid or ellipsoid, from fixed geometry or drawn from the SynthSpec ranges."""
    if spec.kind not in PRIMITIVES:
        raise SynthSpecError(f"primitive_solid needs one of {PRIMITIVES}, got {spec.kind!r}")
    if spec.extent is not None:
        center = spec.center if spec.center is not None else (spec.size / 2.0,) * 3
        return rasterize(spec.kind, spec.size, center, spec.extent)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    center, axes = _draw_geometry(spec.kind, spec, rng)
    return rasterize(spec.kind, spec.size, center, axes)


def primitive_set(spec):
    """spec.count primitives; kind "solids" cycles sphere, cuboid, ellipsoid."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(spec.count):
        kind = PRIMITIVES[i % 3] if spec.kind == "solids" else spec.kind
        if spec.extent is not None:
            center = spec.center if spec.center is not None else (spec.size / 2.0,) * 3
            axes = _semi_axes(kind, spec.extent)
        else:
            center, axes = _draw_geometry(kind, spec, rng)
        grid = rasterize(kind, spec.size, center, axes)
        out.append((grid, {"class": kind, "center": [float(c) for c in center],
                           "extent": [float(a) for a in axes]}))
    return out


# ========== DATASETS ==========
@dataclass(frozen=True)
class ManifestRow:
    file: str
    label: str
    kind: str
    seed: int
    params: str


def generate_dataset(spec, out_dir):
    """Write spec.count VGRID files and manifest.csv into out_dir; returns the manifest rows."""
    os.makedirs(out_dir, exist_ok=True)
    items = voronoi_grain_set(spec) if spec.kind == "voronoi" else primitive_set(spec)
    rows = []
    for i, (grid, params) in enumerate(items):
        name = f"{spec.kind}_{i:05d}.vgrid"
        save_grid(os.path.join(out_dir, name), grid)
        label = params.pop("class", "grain")
        rows.append(ManifestRow(name, label, spec.kind, spec.seed, json.dumps(params, sort_keys=True)))

    with open(os.path.join(out_dir, MANIFEST_NAME), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.file, r.label, r.kind, r.seed, r.params])
    logger.info(f"Wrote {len(rows)} {spec.kind} volumes to {out_dir} ({json.dumps(asdict(spec), default=list)})")
    return rows


def read_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise SynthSpecError(f"{path}: not a dataset manifest (header {header})")
        return [ManifestRow(r[0], r[1], r[2], int(r[3]), r[4]) for r in reader]


def load_dataset(path):
    """(grids, labels) for every manifest row, in manifest order."""
    root = path if os.path.isdir(path) else os.path.dirname(path)
    rows = read_manifest(path)
    grids = [load_grid(os.path.join(root, r.file)) for r in rows]
    return grids, [r.label for r in rows]
