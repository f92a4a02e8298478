import os

import numpy as np
import pytest

import synth_data as sd
from conftest import cube
from moment_invariants import compute_moments, omega_invariants
from voxel_grid import VoxelGrid


# ========== VORONOI ==========
def test_single_seed_owns_everything():
    volume = sd.voronoi_grains(sd.SynthSpec("voronoi", size=8, points=((4.5, 4.5, 4.5),)))
    assert volume.num_labels == 1
    assert np.all(volume.labels == 1)


def test_two_corner_seeds_split_on_the_bisector():
    spec = sd.SynthSpec("voronoi", size=8, points=((0.5, 0.5, 0.5), (7.5, 7.5, 7.5)))
    labels = sd.voronoi_grains(spec).labels
    i, j, k = np.indices((8, 8, 8))
    np.testing.assert_array_equal(labels, np.where(i + j + k <= 10, 1, 2))


def test_equal_distance_goes_to_lower_seed():
    spec = sd.SynthSpec("voronoi", size=2, points=((0.5, 0.5, 0.5), (1.5, 0.5, 0.5)))
    forward = sd.voronoi_grains(spec).labels
    assert forward[0, 0, 0] == 1 and forward[1, 0, 0] == 2

    tie = sd.SynthSpec("voronoi", size=3, points=((0.5, 1.5, 1.5), (2.5, 1.5, 1.5)))
    labels = sd.voronoi_grains(tie).labels
    assert np.all(labels[1] == 1)


def test_fifty_seeds_partition_the_domain():
    volume = sd.voronoi_grains(sd.SynthSpec("voronoi", size=64, n_seeds=50, seed=11))
    assert volume.num_labels == 50
    assert int(volume.volumes()[1:].sum()) == 64 ** 3
    assert np.all(volume.volumes()[1:] > 0)


@pytest.mark.parametrize("kw", [{"n_seeds": 0}, {"points": ()}, {"n_seeds": 513}])
def test_bad_seed_counts(kw):
    with pytest.raises(sd.SynthSpecError):
        sd.voronoi_grains(sd.SynthSpec("voronoi", size=8, **kw))


def test_voronoi_is_deterministic():
    spec = sd.SynthSpec("voronoi", size=16, n_seeds=10, seed=5)
    a, b = sd.voronoi_grains(spec), sd.voronoi_grains(spec)
    assert a.labels.tobytes() == b.labels.tobytes()
    other = sd.voronoi_grains(sd.SynthSpec("voronoi", size=16, n_seeds=10, seed=6))
    assert not np.array_equal(a.labels, other.labels)


def test_voronoi_grain_set_gives_interior_grains():
    spec = sd.SynthSpec("voronoi", size=32, n_seeds=30, count=3, grain_cube=16, seed=2)
    items = sd.voronoi_grain_set(spec)
    assert len(items) == 3
    for grid, params in items:
        assert grid.dims == (16, 16, 16)
        assert grid.solid_count() == params["volume"] > 0


# ========== PRIMITIVES ==========
def test_tiny_sphere_is_one_voxel():
    grid = sd.rasterize("sphere", 3, (1.5, 1.5, 1.5), 0.6)
    assert grid.solid_count() == 1
    assert grid.data[1, 1, 1] == 1.0


def test_cuboid_is_the_two_voxel_cube():
    grid = sd.rasterize("cuboid", 8, (4.0, 4.0, 4.0), 1.0)
    np.testing.assert_array_equal(grid.data, cube(8, 3, 5))
    inv = omega_invariants(compute_moments(grid))
    assert (inv.omega1, inv.omega2, inv.omega3) == pytest.approx((16.0, 256.0, 4096.0))


def test_round_ellipsoid_equals_sphere():
    a = sd.rasterize("ellipsoid", 12, (6, 6, 6), (4.0, 4.0, 4.0))
    b = sd.rasterize("sphere", 12, (6, 6, 6), 4.0)
    assert a == b


def test_sphere_volume_close_to_analytic():
    grid = sd.rasterize("sphere", 24, (12, 12, 12), 10.0)
    assert grid.solid_count() == pytest.approx(4.0 / 3.0 * np.pi * 1000.0, rel=0.05)


@pytest.mark.parametrize("kind, center, extent", [
    ("sphere", (4, 4, 4), 0.0),
    ("cuboid", (4, 4, 4), (1.0, -1.0, 1.0)),
    ("sphere", (4, 4, 4), (1.0, 2.0, 1.0)),
    ("ellipsoid", (1, 1, 1), (3.0, 3.0, 3.0)),
    ("torus", (4, 4, 4), 1.0),
])
def test_rasterize_rejects_bad_geometry(kind, center, extent):
    with pytest.raises(sd.SynthSpecError):
        sd.rasterize(kind, 8, center, extent)


def test_primitive_solid_from_fixed_geometry():
    grid = sd.primitive_solid(sd.SynthSpec("cuboid", size=8, extent=1.0))
    assert grid.solid_count() == 8


def test_random_primitives_fit_and_are_nonempty():
    for grid, params in sd.primitive_set(sd.SynthSpec("solids", size=16, count=12, seed=9)):
        assert grid.dims == (16, 16, 16)
        assert grid.solid_count() > 0
        assert all(e > 0 for e in params["extent"])


def test_spec_validation():
    with pytest.raises(sd.SynthSpecError):
        sd.SynthSpec("cylinder")
    with pytest.raises(sd.SynthSpecError):
        sd.SynthSpec("sphere", radius=(0.4, 0.45))
    with pytest.raises(sd.SynthSpecError):
        sd.SynthSpec("sphere", radius=(0.3, 0.2))


# ========== DATASETS ==========
def test_generate_dataset_is_deterministic(tmp_path):
    spec = sd.SynthSpec("solids", size=16, count=6, seed=3)
    rows_a = sd.generate_dataset(spec, str(tmp_path / "a"))
    rows_b = sd.generate_dataset(spec, str(tmp_path / "b"))
    assert rows_a == rows_b
    assert [r.label for r in rows_a] == ["sphere", "cuboid", "ellipsoid"] * 2
    for r in rows_a:
        assert (tmp_path / "a" / r.file).read_bytes() == (tmp_path / "b" / r.file).read_bytes()
    assert (tmp_path / "a" / sd.MANIFEST_NAME).read_bytes() == (tmp_path / "b" / sd.MANIFEST_NAME).read_bytes()


def test_load_dataset_follows_manifest(tmp_path):
    spec = sd.SynthSpec("sphere", size=16, count=3, seed=1)
    rows = sd.generate_dataset(spec, str(tmp_path))
    grids, labels = sd.load_dataset(str(tmp_path))
    assert labels == ["sphere"] * 3
    assert all(isinstance(g, VoxelGrid) and g.is_binary for g in grids)
    assert grids[0] == sd.primitive_set(spec)[0][0]
    assert [r.file for r in sd.read_manifest(os.path.join(str(tmp_path), sd.MANIFEST_NAME))] == \
        [r.file for r in rows]


def test_read_manifest_rejects_other_csv(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(sd.SynthSpecError):
        sd.read_manifest(str(path))
