"""Tests for synthscene.py: scene generation, painter's-order depth, dataset, cache."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from fusejepa.synthscene import (
    DepthRenderConfig,
    SceneCache,
    SceneDataset,
    _ground_depth,
    _object_mask,
    gen_scene,
    render_sparse_depth,
    scene_seed,
)
from fusejepa.types import NUM_CLASSES, PointSet


def _points(rows, cols, depths) -> PointSet:
    return PointSet(np.array(rows), np.array(cols), np.array(depths, dtype=float))


def _assert_same_scene(a, b) -> None:
    for key in ("rgb", "depth_dense", "depth_sparse", "seg", "instance"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))
    assert [o.depth for o in a.objects] == [o.depth for o in b.objects]
    assert [o.cls for o in a.objects] == [o.cls for o in b.objects]


class TestGenScene:
    def test_deterministic(self):
        _assert_same_scene(gen_scene(5, 32), gen_scene(5, 32))

    def test_seeds_differ(self):
        assert not np.array_equal(gen_scene(5, 32).rgb, gen_scene(6, 32).rgb)

    def test_shapes_and_ranges(self, scene):
        assert scene.rgb.shape == (32, 32, 3)
        assert scene.rgb.dtype == np.float32
        assert 0.0 <= scene.rgb.min() and scene.rgb.max() <= 1.0
        assert set(np.unique(scene.seg)) <= set(range(NUM_CLASSES))
        assert 3 <= len(scene.objects) <= 8
        assert scene.depth_dense.min() > 0.0
        assert 0.0 <= scene.depth_sparse.min() and scene.depth_sparse.max() <= 1.0
        assert scene.thermal is None

    def test_instance_matches_depth_and_class(self, scene):
        for k, obj in enumerate(scene.objects):
            where = scene.instance == k
            assert np.all(scene.depth_dense[where] == np.float32(obj.depth))
            assert np.all(scene.seg[where] == obj.cls)

    def test_nearest_surface_wins(self, scene):
        size = scene.size
        rows, cols = np.mgrid[0:size, 0:size]
        for k, obj in enumerate(scene.objects):
            covered = _object_mask(obj, rows, cols)
            assert np.all(scene.depth_dense[covered] <= np.float32(obj.depth))
        ground = _ground_depth(size, int(round(0.35 * size)), 80.0)
        assert np.all(scene.depth_dense <= ground[:, None].astype(np.float32))

    def test_too_small(self):
        with pytest.raises(ValueError):
            gen_scene(0, 4)

    def test_thermal_companion(self):
        sample = gen_scene(3, 16, companion="thermal")
        assert sample.thermal.shape == (16, 16)
        assert 0.0 <= sample.thermal.min() and sample.thermal.max() <= 1.0

    def test_unknown_companion(self):
        with pytest.raises(ValueError):
            gen_scene(3, 16, companion="radar")


class TestSparseDepth:
    def test_nearest_point_wins(self):
        cfg = DepthRenderConfig(r_max=80.0)
        out = render_sparse_depth(_points([1, 1], [2, 2], [40.0, 10.0]), cfg, (4, 4))
        assert out[1, 2] == 0.125
        assert np.count_nonzero(out) == 1

    def test_normalization(self):
        out = render_sparse_depth(_points([0], [0], [40.0]), DepthRenderConfig(r_max=80.0), (2, 2))
        assert out[0, 0] == 0.5

    def test_beyond_range_clips(self):
        out = render_sparse_depth(_points([0], [0], [200.0]), DepthRenderConfig(r_max=80.0), (2, 2))
        assert out[0, 0] == 1.0

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        rows = rng.integers(0, 5, 40)
        cols = rng.integers(0, 5, 40)
        depths = rng.uniform(1.0, 70.0, 40)
        cfg = DepthRenderConfig()
        expected = render_sparse_depth(PointSet(rows, cols, depths), cfg, (5, 5))
        for _ in range(5):
            perm = rng.permutation(40)
            out = render_sparse_depth(PointSet(rows[perm], cols[perm], depths[perm]), cfg, (5, 5))
            np.testing.assert_array_equal(out, expected)

    def test_empty(self):
        out = render_sparse_depth(_points([], [], []), DepthRenderConfig(), (3, 3))
        assert not out.any()

    def test_nonpositive_depth(self):
        with pytest.raises(ValueError):
            render_sparse_depth(_points([0], [0], [0.0]), DepthRenderConfig(), (2, 2))

    def test_outside_image(self):
        with pytest.raises(ValueError):
            render_sparse_depth(_points([0], [5], [3.0]), DepthRenderConfig(), (2, 2))

    def test_full_return_matches_dense(self):
        sample = gen_scene(7, 32, DepthRenderConfig(return_prob=1.0))
        expected = np.clip(sample.depth_dense.astype(np.float64) / 80.0, 0.0, 1.0).astype(np.float32)
        np.testing.assert_array_equal(sample.depth_sparse, expected)

    def test_returns_agree_with_dense(self, scene):
        hit = scene.depth_sparse > 0
        expected = np.clip(scene.depth_dense[hit].astype(np.float64) / 80.0, 0.0, 1.0).astype(np.float32)
        np.testing.assert_array_equal(scene.depth_sparse[hit], expected)

    def test_return_count_is_binomial(self):
        sample = gen_scene(0, 64, DepthRenderConfig(return_prob=0.3))
        n = 64 * 64
        mean, sigma = 0.3 * n, math.sqrt(n * 0.3 * 0.7)
        assert abs(np.count_nonzero(sample.depth_sparse) - mean) < 4 * sigma

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            DepthRenderConfig(return_prob=0.0)
        with pytest.raises(ValueError):
            DepthRenderConfig(r_max=-1.0)


class TestSceneCache:
    def test_round_trip(self, tmp_path: Path, scene):
        cache = SceneCache(tmp_path / "cache")
        cache.put(scene)
        loaded = cache.get(scene.seed, scene.size)
        assert loaded is not None
        _assert_same_scene(loaded, scene)
        assert "<f4" in (tmp_path / "cache" / "manifest.txt").read_text()

    def test_thermal_round_trip(self, tmp_path: Path):
        sample = gen_scene(9, 16, companion="thermal")
        cache = SceneCache(tmp_path)
        cache.put(sample, "thermal")
        loaded = cache.get(9, 16, "thermal")
        np.testing.assert_array_equal(loaded.thermal, sample.thermal)
        assert cache.get(9, 16, "depth") is None

    def test_missing(self, tmp_path: Path):
        assert SceneCache(tmp_path).get(1, 16) is None

    def test_version_mismatch_invalidates(self, tmp_path: Path, scene):
        SceneCache(tmp_path, version=1).put(scene)
        assert SceneCache(tmp_path, version=2).get(scene.seed, scene.size) is None

    def test_truncated_entry(self, tmp_path: Path, scene):
        path = SceneCache(tmp_path).put(scene)
        path.write_bytes(path.read_bytes()[:100])
        assert SceneCache(tmp_path).get(scene.seed, scene.size) is None

    def test_manifest_keeps_all_entries(self, tmp_path: Path):
        cache = SceneCache(tmp_path)
        for seed in (1, 2, 3):
            cache.put(gen_scene(seed, 16))
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert len(lines) == 3

    def test_concurrent_writers_keep_every_entry(self, tmp_path: Path):
        samples = [gen_scene(seed, 8) for seed in range(16)]
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda s: SceneCache(tmp_path).put(s), samples))
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert len(lines) == 16
        for sample in samples:
            assert SceneCache(tmp_path).get(sample.seed, 8) is not None

    def test_render_settings_are_part_of_the_key(self, tmp_path: Path):
        sparse = DepthRenderConfig(return_prob=0.3)
        full = DepthRenderConfig(return_prob=1.0)
        cache = SceneCache(tmp_path)
        cache.put(gen_scene(4, 16, sparse), render=sparse)
        assert cache.get(4, 16, render=full) is None
        assert cache.get(4, 16, render=sparse) is not None

    @pytest.mark.parametrize(
        "first,second",
        [
            (DepthRenderConfig(return_prob=0.3), DepthRenderConfig(return_prob=1.0)),
            (DepthRenderConfig(r_max=80.0), DepthRenderConfig(r_max=40.0)),
            (DepthRenderConfig(seed=0), DepthRenderConfig(seed=1)),
        ],
    )
    def test_shared_cache_never_serves_other_render(self, tmp_path: Path, first, second):
        cache = SceneCache(tmp_path)
        SceneDataset(seed=2, size=16, length=3, render=first, cache=cache).get_many(range(3))
        cached = SceneDataset(seed=2, size=16, length=3, render=second, cache=cache).get_many(range(3))
        fresh = SceneDataset(seed=2, size=16, length=3, render=second).get_many(range(3))
        for a, b in zip(cached, fresh):
            np.testing.assert_array_equal(a.depth_sparse, b.depth_sparse)
        assert len((tmp_path / "manifest.txt").read_text().splitlines()) == 6


class TestSceneDataset:
    def test_item_matches_generator(self):
        data = SceneDataset(seed=4, size=16, length=10)
        expected = gen_scene(scene_seed(4, 3), 16, data.render)
        _assert_same_scene(data[3], expected)

    def test_index_out_of_range(self):
        data = SceneDataset(seed=4, size=16, length=10)
        with pytest.raises(IndexError):
            data[10]

    def test_epoch_order_pure(self):
        data = SceneDataset(seed=4, size=16, length=32)
        order = data.epoch_order(2)
        np.testing.assert_array_equal(order, data.epoch_order(2))
        np.testing.assert_array_equal(np.sort(order), np.arange(32))
        assert not np.array_equal(order, data.epoch_order(3))
        other = SceneDataset(seed=5, size=16, length=32)
        assert not np.array_equal(order, other.epoch_order(2))

    def test_worker_count_does_not_change_data(self):
        serial = SceneDataset(seed=1, size=16, length=8).get_many([5, 0, 3])
        threaded = SceneDataset(seed=1, size=16, length=8, num_workers=3).get_many([5, 0, 3])
        for a, b in zip(serial, threaded):
            _assert_same_scene(a, b)

    def test_batches_cover_epoch(self):
        data = SceneDataset(seed=1, size=16, length=7)
        seeds = [s.seed for batch in data.batches(0, 3) for s in batch]
        assert sorted(seeds) == sorted(scene_seed(1, i) for i in range(7))

    def test_cache_is_used(self, tmp_path: Path):
        cache = SceneCache(tmp_path)
        data = SceneDataset(seed=1, size=16, length=4, cache=cache)
        first = data[2]
        assert cache.get(first.seed, 16, render=data.render) is not None
        assert cache.get(first.seed, 16, render=DepthRenderConfig(seed=99)) is None
        _assert_same_scene(data[2], first)

    def test_from_run(self, tiny_run):
        data = SceneDataset.from_run(tiny_run, seed_offset=1000, length=5)
        assert len(data) == 5
        assert data.seed == 1000
        assert data.size == 16
