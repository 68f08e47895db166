"""Procedural paired scenes: RGB, dense depth, sparse rendered depth, labels.

Every sample is a pure function of its seed. Objects stand on a ground plane
whose depth grows toward the horizon and are painted far-to-near, so RGB,
segmentation, instance ids and dense depth agree wherever objects overlap.
"""

from __future__ import annotations

import fcntl
import logging
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .types import (
    CLASS_BACKGROUND,
    CLASS_BOX,
    CLASS_DISK,
    CLASS_GROUND,
    NUM_CLASSES,
    PointSet,
    SceneObject,
    SceneSample,
)

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 1
R_MAX = 80.0
HORIZON_FRAC = 0.35
CAMERA_HEIGHT = 2.0  # meters; nearest ground row sits at this depth
MIN_OBJECTS, MAX_OBJECTS = 3, 8
MIN_OBJECT_DEPTH, MAX_OBJECT_DEPTH = 2.0, 70.0
EMISSIVITY = {CLASS_BACKGROUND: 0.1, CLASS_GROUND: 0.4, CLASS_BOX: 0.85, CLASS_DISK: 0.6}
COMPANIONS = ("depth", "thermal")


@dataclass
class DepthRenderConfig:
    r_max: float = R_MAX
    return_prob: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.r_max <= 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if not 0.0 < self.return_prob <= 1.0:
            raise ValueError(f"return_prob={self.return_prob} outside (0, 1]")

    @classmethod
    def from_run(cls, run: RunConfig) -> DepthRenderConfig:
        return cls(r_max=run.r_max, return_prob=run.return_prob, seed=run.seed)


def scene_seed(seed: int, index: int) -> int:
    """Per-sample seed derived from the dataset seed and the sample index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------


def _ground_depth(size: int, horizon: int, r_max: float) -> np.ndarray:
    """Per-row depth: r_max above the horizon, CAMERA_HEIGHT / v below it."""
    rows = np.arange(size, dtype=np.float64)
    v = (rows - horizon + 1) / (size - horizon)
    depth = np.full(size, r_max)
    below = rows >= horizon
    depth[below] = np.minimum(r_max, CAMERA_HEIGHT / v[below])
    return depth


def _base_row(depth: float, size: int, horizon: int) -> float:
    """Image row where the ground plane reaches ``depth``."""
    return horizon - 1 + CAMERA_HEIGHT * (size - horizon) / depth


def _sample_objects(rng: np.random.Generator, size: int, horizon: int) -> list[SceneObject]:
    count = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    objects = []
    for _ in range(count):
        cls = CLASS_BOX if rng.random() < 0.5 else CLASS_DISK
        depth = float(np.float32(rng.uniform(MIN_OBJECT_DEPTH, MAX_OBJECT_DEPTH)))
        scale = rng.uniform(4.0, 12.0) * size / depth
        height = float(np.clip(scale * rng.uniform(0.6, 1.4), 2.0, 0.6 * size))
        width = float(np.clip(scale * rng.uniform(0.6, 1.4), 2.0, 0.6 * size))
        base = _base_row(depth, size, horizon)
        center = (base - height / 2.0, float(rng.uniform(0.0, size)))
        color = tuple(float(c) for c in np.float32(rng.uniform(0.05, 0.95, size=3)))
        objects.append(SceneObject(cls, center, (height, width), depth, color))  # type: ignore[arg-type]
    return objects


def _object_mask(obj: SceneObject, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    cr, cc = obj.center
    hh, hw = obj.extent[0] / 2.0, obj.extent[1] / 2.0
    dr, dc = rows + 0.5 - cr, cols + 0.5 - cc
    if obj.cls == CLASS_DISK:
        return (dr / hh) ** 2 + (dc / hw) ** 2 <= 1.0
    return (np.abs(dr) <= hh) & (np.abs(dc) <= hw)


def thermal_map(seg: np.ndarray, seed: int) -> np.ndarray:
    """Class-dependent emissivity plus noise, in [0, 1]."""
    rng = np.random.default_rng([seed, 2])
    lut = np.array([EMISSIVITY[c] for c in range(NUM_CLASSES)])
    values = lut[seg] + rng.normal(0.0, 0.05, size=seg.shape)
    return np.clip(values, 0.0, 1.0).astype(np.float32)


def gen_scene(
    seed: int,
    size: int,
    render: DepthRenderConfig | None = None,
    companion: str = "depth",
) -> SceneSample:
    if size < 8:
        raise ValueError(f"Scene size must be >= 8, got {size}")
    if companion not in COMPANIONS:
        raise ValueError(f"Unknown companion={companion!r}. Valid: {COMPANIONS}")
    render = render or DepthRenderConfig()
    rng = np.random.default_rng(seed)
    horizon = int(round(HORIZON_FRAC * size))
    rows, cols = np.mgrid[0:size, 0:size]

    ground = _ground_depth(size, horizon, render.r_max)
    depth = np.repeat(ground[:, None], size, axis=1)
    seg = np.where(rows >= horizon, CLASS_GROUND, CLASS_BACKGROUND).astype(np.int64)
    instance = np.full((size, size), -1, dtype=np.int64)

    sky = np.array([0.55, 0.7, 0.9]) - 0.25 * (rows[..., None] / size)
    near = np.clip((rows - horizon) / max(1, size - horizon), 0.0, 1.0)[..., None]
    earth = np.array([0.35, 0.4, 0.3]) + 0.2 * near
    rgb = np.where(seg[..., None] == CLASS_GROUND, earth, sky)

    objects = _sample_objects(rng, size, horizon)
    # far to near: nearer objects overwrite
    for k in sorted(range(len(objects)), key=lambda i: -objects[i].depth):
        obj = objects[k]
        mask = _object_mask(obj, rows, cols) & (depth >= obj.depth)
        rgb[mask] = obj.color
        seg[mask] = obj.cls
        depth[mask] = obj.depth
        instance[mask] = k

    rgb = np.clip(rgb + rng.normal(0.0, 0.02, size=rgb.shape), 0.0, 1.0).astype(np.float32)
    sample = SceneSample(
        rgb=rgb,
        depth_dense=depth.astype(np.float32),
        depth_sparse=np.zeros((size, size), dtype=np.float32),
        seg=seg,
        instance=instance,
        objects=objects,
        seed=seed,
    )
    sample.depth_sparse = render_sparse_depth(sample_points(sample, render), render, (size, size))
    if companion == "thermal":
        sample.thermal = thermal_map(seg, seed)
    return sample


# ---------------------------------------------------------------------------
# Sparse depth
# ---------------------------------------------------------------------------


def sample_points(scene: SceneSample, cfg: DepthRenderConfig) -> PointSet:
    """Bernoulli(return_prob) returns per pixel, depths read from the dense map."""
    rng = np.random.default_rng([scene.seed, cfg.seed, 1])
    hit = rng.random(scene.depth_dense.shape) < cfg.return_prob
    rows, cols = np.nonzero(hit)
    return PointSet(rows, cols, scene.depth_dense[rows, cols].astype(np.float64))


def render_sparse_depth(points: PointSet, cfg: DepthRenderConfig, shape: tuple[int, int]) -> np.ndarray:
    """Painter's-order splat of depth / r_max; nearest point per pixel wins, empty pixels stay 0."""
    out = np.zeros(shape, dtype=np.float32)
    if len(points) == 0:
        return out
    depths = np.asarray(points.depths, dtype=np.float64)
    if np.any(depths <= 0) or not np.all(np.isfinite(depths)):
        raise ValueError("render_sparse_depth: depths must be positive and finite")
    rows = np.asarray(points.rows, dtype=np.intp)
    cols = np.asarray(points.cols, dtype=np.intp)
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]:
        raise ValueError(f"render_sparse_depth: point outside image of shape {shape}")

    order = np.argsort(-depths, kind="stable")  # depth-descending
    flat = rows[order] * shape[1] + cols[order]
    values = np.clip(depths[order] / cfg.r_max, 0.0, 1.0)
    # Last write in depth-descending order wins: keep the first occurrence of the reversed list.
    uniq, first = np.unique(flat[::-1], return_index=True)
    out.flat[uniq] = values[::-1][first]
    return out


# ---------------------------------------------------------------------------
# Dataset and cache
# ---------------------------------------------------------------------------

_ARRAY_LAYOUT = ("rgb", "depth_dense", "depth_sparse", "seg", "instance")
_OBJECT_FIELDS = 9  # cls, center(2), extent(2), depth, color(3)


class SceneCache:
    """One little-endian f32 ``.bin`` per sample plus a shared ``manifest.txt``.

    Manifest lines: ``<file> <seed> <size> <companion> <n_objects> <dtype> <version>
    <r_max> <return_prob> <render_seed>``. The render settings are part of the key:
    an entry written under other settings, or by another generator version, is a miss.
    """

    def __init__(self, root: Path, version: int = GENERATOR_VERSION):
        self.root = Path(root)
        self.version = version
        self.manifest_path = self.root / "manifest.txt"

    @staticmethod
    def _render_fields(render: DepthRenderConfig) -> list[str]:
        return [repr(float(render.r_max)), repr(float(render.return_prob)), str(render.seed)]

    def _file_name(self, seed: int, size: int, companion: str, render: DepthRenderConfig) -> str:
        r_max, return_prob, render_seed = self._render_fields(render)
        return f"scene_{seed}_{size}_{companion}_r{r_max}_p{return_prob}_s{render_seed}.bin"

    @staticmethod
    def _parse_manifest(text: str) -> dict[str, list[str]]:
        entries = {}
        for line in text.splitlines():
            parts = line.split()
            if len(parts) == 10:
                entries[parts[0]] = parts
        return entries

    def _read_manifest(self) -> dict[str, list[str]]:
        if not self.manifest_path.exists():
            return {}
        with open(self.manifest_path) as f:
            fcntl.flock(f, fcntl.LOCK_SH)
            try:
                return self._parse_manifest(f.read())
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)

    def _update_manifest(self, parts: list[str]) -> None:
        """Insert or replace one entry; the lock covers the whole read-modify-write."""
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_path, "a+") as f:
            fcntl.flock(f, fcntl.LOCK_EX)
            try:
                f.seek(0)
                entries = self._parse_manifest(f.read())
                entries[parts[0]] = parts
                f.seek(0)
                f.truncate()
                f.write("".join(" ".join(p) + "\n" for p in sorted(entries.values())))
                f.flush()
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)

    def put(
        self,
        sample: SceneSample,
        companion: str = "depth",
        render: DepthRenderConfig | None = None,
    ) -> Path:
        render = render or DepthRenderConfig()
        name = self._file_name(sample.seed, sample.size, companion, render)
        arrays = [getattr(sample, key) for key in _ARRAY_LAYOUT]
        if companion == "thermal":
            arrays.append(sample.thermal)
        objects = np.array(
            [[o.cls, *o.center, *o.extent, o.depth, *o.color] for o in sample.objects],
            dtype=np.float64,
        ).reshape(-1, _OBJECT_FIELDS)
        blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in [*arrays, objects])
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        path.write_bytes(blob)
        self._update_manifest([
            name, str(sample.seed), str(sample.size), companion,
            str(len(sample.objects)), "<f4", str(self.version), *self._render_fields(render),
        ])
        return path

    def get(
        self,
        seed: int,
        size: int,
        companion: str = "depth",
        render: DepthRenderConfig | None = None,
    ) -> SceneSample | None:
        render = render or DepthRenderConfig()
        name = self._file_name(seed, size, companion, render)
        entry = self._read_manifest().get(name)
        path = self.root / name
        if entry is None or not path.exists():
            return None
        if int(entry[6]) != self.version:
            logger.info("Cache entry %s has generator version %s != %d; regenerating", name, entry[6], self.version)
            return None
        if entry[7:10] != self._render_fields(render):
            logger.info("Cache entry %s was rendered with %s; regenerating", name, entry[7:10])
            return None
        n_objects = int(entry[4])
        flat = np.frombuffer(path.read_bytes(), dtype="<f4")
        shapes = [(size, size, 3), (size, size), (size, size), (size, size), (size, size)]
        if companion == "thermal":
            shapes.append((size, size))
        shapes.append((n_objects, _OBJECT_FIELDS))
        expected = sum(int(np.prod(s)) for s in shapes)
        if flat.size != expected:
            logger.warning("Cache entry %s is truncated (%d of %d floats); regenerating", name, flat.size, expected)
            return None
        arrays, offset = [], 0
        for shape in shapes:
            count = int(np.prod(shape))
            arrays.append(flat[offset : offset + count].reshape(shape).astype(np.float32))
            offset += count
        objects = [
            SceneObject(int(r[0]), (float(r[1]), float(r[2])), (float(r[3]), float(r[4])), float(r[5]),
                        (float(r[6]), float(r[7]), float(r[8])))
            for r in arrays[-1]
        ]
        return SceneSample(
            rgb=arrays[0],
            depth_dense=arrays[1],
            depth_sparse=arrays[2],
            seg=arrays[3].astype(np.int64),
            instance=arrays[4].astype(np.int64),
            objects=objects,
            seed=seed,
            thermal=arrays[5] if companion == "thermal" else None,
        )


class SceneDataset:
    """Indexable stream of scenes; sample ``i`` is generated from ``scene_seed(seed, i)``."""

    def __init__(
        self,
        seed: int,
        size: int,
        length: int,
        render: DepthRenderConfig | None = None,
        companion: str = "depth",
        num_workers: int = 0,
        cache: SceneCache | None = None,
    ):
        if length < 1:
            raise ValueError(f"Dataset length must be >= 1, got {length}")
        self.seed = seed
        self.size = size
        self.length = length
        self.render = render or DepthRenderConfig(seed=seed)
        self.companion = companion
        self.num_workers = num_workers
        self.cache = cache

    @classmethod
    def from_run(cls, run: RunConfig, seed_offset: int = 0, length: int | None = None) -> SceneDataset:
        return cls(
            seed=run.seed + seed_offset,
            size=run.scene_size,
            length=length or run.dataset_size,
            render=DepthRenderConfig.from_run(run),
            companion=run.companion,
            num_workers=run.num_workers,
            cache=SceneCache(run.cache_dir) if run.cache_dir is not None else None,
        )

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> SceneSample:
        if not 0 <= index < self.length:
            raise IndexError(f"Scene index {index} outside [0, {self.length})")
        seed = scene_seed(self.seed, index)
        if self.cache is not None:
            cached = self.cache.get(seed, self.size, self.companion, self.render)
            if cached is not None:
                return cached
        sample = gen_scene(seed, self.size, self.render, self.companion)
        if self.cache is not None:
            self.cache.put(sample, self.companion, self.render)
        return sample

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Permutation of sample indices; a pure function of (seed, epoch)."""
        return np.random.default_rng([self.seed, epoch, 7]).permutation(self.length)

    def get_many(self, indices: Sequence[int]) -> list[SceneSample]:
        """Samples in ``indices`` order regardless of worker count."""
        if self.num_workers <= 0 or self.cache is not None:
            return [self[int(i)] for i in indices]
        with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
            return list(pool.map(lambda i: self[int(i)], indices))

    def batches(self, epoch: int, batch_size: int) -> Iterator[list[SceneSample]]:
        order = self.epoch_order(epoch)
        for start in range(0, self.length, batch_size):
            yield self.get_many(order[start : start + batch_size])
