import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eulerflow.geom import (
    FrameSequence,
    PointCloud,
    build_index,
    make_sequence,
    nearest,
    nearest_bruteforce,
    normalized_time,
)


def test_single_point_index():
    index = build_index(PointCloud([[0.0, 0.0, 0.0]]))
    assert len(index) == 1
    assert nearest(index, [5.0, -1.0, 2.0]) == (0, 30.0)


def test_empty_cloud_rejected():
    with pytest.raises(ValueError, match="empty point set"):
        build_index(PointCloud(np.zeros((0, 3))))


def test_nearest_simple_pair():
    index = build_index(PointCloud([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
    i, d2 = nearest(index, [0.4, 0.0, 0.0])
    assert i == 0
    assert d2 == pytest.approx(0.16, abs=1e-15)


def test_query_on_indexed_point():
    pts = np.random.default_rng(1).normal(size=(50, 3))
    index = build_index(PointCloud(pts))
    for j in (0, 17, 49):
        assert nearest(index, pts[j]) == (j, 0.0)


def test_duplicates_take_lowest_index():
    cloud = PointCloud([[1.0, 1.0, 1.0]] * 3)
    index = build_index(cloud)
    assert nearest(index, [1.0, 1.0, 1.0])[0] == 0
    assert nearest(index, [4.0, 0.0, 1.0])[0] == 0
    assert nearest_bruteforce(cloud, [4.0, 0.0, 1.0])[0] == 0


def test_ties_at_equal_distance():
    # query equidistant from indices 3 and 1; lowest index wins
    pts = [[5, 5, 5], [1, 0, 0], [7, 7, 7], [-1, 0, 0]]
    index = build_index(PointCloud(pts))
    assert nearest(index, [0, 0, 0]) == (1, 1.0)
    assert nearest_bruteforce(PointCloud(pts), [0, 0, 0]) == (1, 1.0)


def test_lattice_ties_match_bruteforce():
    # integer lattice with half-integer queries: every query has many exact ties
    g = np.arange(4.0)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    pts = pts[np.random.default_rng(3).permutation(len(pts))]
    cloud = PointCloud(pts)
    index = build_index(cloud)
    h = np.arange(-0.5, 4.0, 0.5)
    queries = np.stack(np.meshgrid(h, h, h, indexing="ij"), -1).reshape(-1, 3)
    for q in queries:
        assert nearest(index, q) == nearest_bruteforce(cloud, q)


def test_index_matches_bruteforce_200_points():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(-5, 5, size=(200, 3)))
    index = build_index(cloud)
    for q in rng.uniform(-6, 6, size=(1000, 3)):
        assert nearest(index, q) == nearest_bruteforce(cloud, q)


def test_index_matches_bruteforce_10k_queries_vectorised():
    rng = np.random.default_rng(1)
    cloud = PointCloud(rng.normal(size=(300, 3)))
    index = build_index(cloud)
    queries = rng.normal(size=(10_000, 3)) * 1.5
    idx, d2 = index.query(queries)
    for i in range(0, len(queries), 97):
        assert (idx[i], d2[i]) == nearest_bruteforce(cloud, queries[i])
    # full comparison with the same formula
    diff = cloud.points[None, :, :] - queries[:, None, :]
    all_d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    np.testing.assert_array_equal(idx, all_d2.argmin(axis=1))
    np.testing.assert_array_equal(d2, all_d2.min(axis=1))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 500),
    seed=st.integers(0, 2**32 - 1),
    quantize=st.booleans(),
)
def test_property_index_equals_bruteforce(n, seed, quantize):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, size=(n, 3))
    queries = rng.uniform(-4, 4, size=(20, 3))
    if quantize:
        # coarse grids produce duplicates and exact ties
        pts = np.round(pts)
        queries = np.round(queries * 2) / 2
    cloud = PointCloud(pts)
    index = build_index(cloud)
    for q in queries:
        assert nearest(index, q) == nearest_bruteforce(cloud, q)


def test_index_construction_deterministic():
    pts = np.random.default_rng(5).normal(size=(100, 3))
    q = np.random.default_rng(6).normal(size=(40, 3))
    a = build_index(PointCloud(pts)).query(q)
    b = build_index(PointCloud(pts)).query(q)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_non_finite_query_rejected(bad):
    index = build_index(PointCloud([[0.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        nearest(index, bad)


def test_non_finite_points_rejected():
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 0.0]])


def _seq(n_frames):
    return make_sequence([np.zeros((1, 3))] * n_frames)


def test_normalized_time_endpoints_and_midpoint():
    seq = _seq(11)
    assert normalized_time(seq, 0) == -1.0
    assert normalized_time(seq, 10) == 1.0
    assert normalized_time(seq, 5) == 0.0


@pytest.mark.parametrize("frames", [2, 3, 7, 21])
def test_normalized_time_affine_and_increasing(frames):
    seq = _seq(frames)
    n = frames - 1
    ts = [normalized_time(seq, i) for i in range(frames)]
    assert ts[0] == -1.0 and ts[-1] == 1.0
    assert all(b > a for a, b in zip(ts, ts[1:]))
    np.testing.assert_allclose(np.diff(ts), 2.0 / n, rtol=0, atol=1e-15)


@pytest.mark.parametrize("frame", [-1, 11])
def test_normalized_time_out_of_range(frame):
    with pytest.raises(ValueError):
        normalized_time(_seq(11), frame)


def test_sequence_invariants():
    with pytest.raises(ValueError):
        make_sequence([np.zeros((1, 3))])
    frames = [PointCloud(np.zeros((1, 3)), frame_index=0, timestamp=0.0), PointCloud(np.zeros((1, 3)), frame_index=1, timestamp=0.3)]
    with pytest.raises(ValueError, match="apart"):
        FrameSequence(frames, 0.1)
    frames[1] = PointCloud(np.zeros((1, 3)), frame_index=2, timestamp=0.1)
    with pytest.raises(ValueError, match="frame_index"):
        FrameSequence(frames, 0.1)


def test_optional_lists_must_align():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), gt_flow=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), class_id=[0, 1])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), is_dynamic=[True])


def test_cloud_does_not_alias_caller_array():
    pts = np.zeros((2, 3))
    cloud = PointCloud(pts)
    pts[0, 0] = 9.0
    assert cloud.points[0, 0] == 0.0
    assert pts.flags.writeable
