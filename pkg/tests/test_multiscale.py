import math
from collections import defaultdict

import numpy as np
import pytest

from pcqa.cloud_io import NormalizedCloud
from pcqa.errors import InsufficientDensity
from pcqa.multiscale import ScaleTag, build_scale_set, voxel_downsample

from .conftest import random_cloud


def oracle_downsample(cloud, size):
    """Dictionary bucketing with python floats; returns {voxel: (centroid, color)}."""
    buckets = defaultdict(list)
    for p, c in zip(cloud.positions.tolist(), cloud.colors.tolist()):
        key = tuple(math.floor(v / size) for v in p)
        buckets[key].append((p, c))
    out = {}
    for key, members in buckets.items():
        n = len(members)
        cen = [sum(m[0][i] for m in members) / n for i in range(3)]
        col = [math.floor(sum(m[1][i] for m in members) / n + 0.5) for i in range(3)]
        out[key] = (cen, col)
    return out


def test_scale_tags():
    assert [t.voxel_size for t in ScaleTag] == [2.0, 4.0, 8.0]


def test_single_voxel_collapse(rng):
    pos = rng.uniform(0.1, 1.9, size=(10, 3))
    c = NormalizedCloud(pos, rng.integers(0, 256, (10, 3)))
    d = voxel_downsample(c, 2.0)
    assert d.count == 1
    np.testing.assert_allclose(d.positions[0], pos.mean(axis=0), rtol=0, atol=1e-12)


def test_grid_centres_not_merged():
    g = np.arange(5) * 8.0 + 4.0
    pos = np.array([[x, y, z] for x in g for y in g for z in g])
    c = NormalizedCloud(pos, np.zeros_like(pos, dtype=np.uint8))
    assert voxel_downsample(c, 8.0).count == len(pos)


def test_matches_bucket_oracle(rng):
    c = random_cloud(rng, 200, 0, 64)
    d = voxel_downsample(c, 8.0)
    ref = oracle_downsample(c, 8.0)
    assert d.count == len(ref)
    keys = sorted(ref, key=lambda k: (k[2], k[1], k[0]))
    for i, key in enumerate(keys):
        np.testing.assert_allclose(d.positions[i], ref[key][0], rtol=1e-13)
        assert d.colors[i].tolist() == ref[key][1]


def test_boundary_goes_to_higher_voxel():
    pos = np.array([[2.0, 0.5, 0.5], [1.0, 0.5, 0.5]])
    d = voxel_downsample(NormalizedCloud(pos, np.zeros((2, 3))), 2.0)
    assert d.count == 2
    assert d.positions[:, 0].tolist() == [1.0, 2.0]


def test_permutation_invariant_bit_identical(rng):
    c = random_cloud(rng, 3000, 0, 40)
    perm = rng.permutation(c.count)
    a = voxel_downsample(c, 4.0)
    b = voxel_downsample(c.take(perm), 4.0)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.colors.tobytes() == b.colors.tobytes()


def test_centroid_inside_voxel(rng):
    c = random_cloud(rng, 5000, 0, 100)
    size = 8.0
    d = voxel_downsample(c, size)
    keys = np.floor(d.positions / size)
    # closed cube [key*size, (key+1)*size]
    assert np.all(d.positions >= keys * size)
    assert np.all(d.positions <= (keys + 1) * size)


def test_one_point_cloud_insufficient():
    with pytest.raises(InsufficientDensity):
        build_scale_set(NormalizedCloud([[0.0, 0.0, 0.0]], [[0, 0, 0]]))


def test_dense_cloud_counts_monotone(rng):
    c = random_cloud(rng, 100_000)
    ss = build_scale_set(c)
    counts = [x.count for x in ss.clouds]
    assert counts[0] >= counts[1] >= counts[2] >= 30
    lo, hi = c.positions.min(0), c.positions.max(0)
    for x in ss.clouds:
        assert np.all(x.positions >= lo) and np.all(x.positions <= hi)


def test_lattice_survives_all_scales():
    g = np.arange(64) * 16.0 + 0.5
    pos = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    ss = build_scale_set(NormalizedCloud(pos, np.zeros_like(pos, dtype=np.uint8)))
    assert [x.count for x in ss.clouds] == [64 ** 3] * 3
