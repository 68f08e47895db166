"""Multi-crop paired views.

A crop rectangle and flip bit are sampled once per view and applied to both
streams. Photometric ops touch RGB only; the companion stream is only
cropped, flipped and resampled (zero-ignoring area pooling for sparse depth).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ViewError
from .nn import interp_matrix
from .types import CropRect, PairedView, SceneSample, ViewSet

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

MAX_CROP_TRIES = 10
LOG_RATIO = (math.log(3.0 / 4.0), math.log(4.0 / 3.0))

# Photometric strengths (DINO-style)
JITTER_PROB = 0.8
BRIGHTNESS, CONTRAST, SATURATION, HUE = 0.4, 0.4, 0.2, 0.1
GRAYSCALE_PROB = 0.2
BLUR_PROB_GLOBAL = (1.0, 0.1)
BLUR_PROB_LOCAL = 0.5
BLUR_SIGMA = (0.1, 2.0)  # at 224 px; rescaled to the view size
SOLARIZE_PROB = 0.2  # second global view only
SOLARIZE_THRESHOLD = 0.5
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CropSpec:
    kind: str  # "global" | "local"
    scale_lo: float
    scale_hi: float
    out_size: int

    def __post_init__(self) -> None:
        if not 0.0 < self.scale_lo < self.scale_hi <= 1.0:
            raise ValueError(f"Need 0 < lo < hi <= 1, got ({self.scale_lo}, {self.scale_hi})")
        if self.kind not in ("global", "local"):
            raise ValueError(f"Unknown crop kind={self.kind!r}")
        if self.out_size < 1:
            raise ValueError(f"out_size must be positive, got {self.out_size}")

    @classmethod
    def pair_from_run(cls, run: RunConfig) -> tuple[CropSpec, CropSpec]:
        return (
            cls("global", run.global_scale_min, run.global_scale_max, run.image_size),
            cls("local", run.local_scale_min, run.local_scale_max, run.local_size),
        )


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) overlap lengths between output cells and input pixels."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    return np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)


def pool_depth(window: np.ndarray, out_size: int) -> np.ndarray:
    """Area pooling that ignores zero (no-return) pixels; all-zero cells stay 0."""
    window = np.asarray(window, dtype=np.float64)
    wr = area_matrix(out_size, window.shape[0])
    wc = area_matrix(out_size, window.shape[1])
    num = wr @ window @ wc.T
    den = wr @ (window > 0).astype(np.float64) @ wc.T
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return out.astype(np.float32)


def resize(image: np.ndarray, out_size: int, mode: str = "bilinear") -> np.ndarray:
    """(H, W, C) -> (out, out, C)."""
    h, w = image.shape[:2]
    if mode == "nearest":
        ri = np.minimum(((np.arange(out_size) + 0.5) * h / out_size).astype(np.intp), h - 1)
        ci = np.minimum(((np.arange(out_size) + 0.5) * w / out_size).astype(np.intp), w - 1)
        return image[ri][:, ci].astype(np.float32)
    if mode != "bilinear":
        raise ValueError(f"Unknown resize mode={mode!r}")
    out = np.einsum("ij,jkc,lk->ilc", interp_matrix(out_size, h), image, interp_matrix(out_size, w))
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Photometric ops (RGB only)
# ---------------------------------------------------------------------------


def grayscale(rgb: np.ndarray) -> np.ndarray:
    return np.repeat((rgb @ _LUMA)[..., None], 3, axis=-1)


def _rotate_hue(rgb: np.ndarray, shift: float) -> np.ndarray:
    """Rotate chroma in YIQ space by ``shift`` turns."""
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    theta = 2.0 * math.pi * shift
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    mat = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return rgb @ mat.T


def color_jitter(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = rgb * rng.uniform(1 - BRIGHTNESS, 1 + BRIGHTNESS)
    mean = out.mean()
    out = mean + (out - mean) * rng.uniform(1 - CONTRAST, 1 + CONTRAST)
    gray = grayscale(np.clip(out, 0.0, 1.0))
    out = gray + (out - gray) * rng.uniform(1 - SATURATION, 1 + SATURATION)
    out = _rotate_hue(out, rng.uniform(-HUE, HUE))
    return np.clip(out, 0.0, 1.0)


def blur(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sigma = rng.uniform(*BLUR_SIGMA) * rgb.shape[0] / 224.0
    return gaussian_filter(rgb, sigma=(sigma, sigma, 0.0), mode="reflect")


def solarize(rgb: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    return np.where(rgb >= threshold, 1.0 - rgb, rgb)


def photometric(rgb: np.ndarray, rng: np.random.Generator, kind: str, index: int) -> np.ndarray:
    """Jitter, grayscale, blur and (second global view) solarize, each with its own probability."""
    out = rgb.astype(np.float64)
    if rng.random() < JITTER_PROB:
        out = color_jitter(out, rng)
    if rng.random() < GRAYSCALE_PROB:
        out = grayscale(out)
    if kind == "global":
        blur_prob = BLUR_PROB_GLOBAL[min(index, 1)]
    else:
        blur_prob = BLUR_PROB_LOCAL
    if rng.random() < blur_prob:
        out = blur(out, rng)
    if kind == "global" and index == 1 and rng.random() < SOLARIZE_PROB:
        out = solarize(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------


def sample_crop(rng: np.random.Generator, height: int, width: int, spec: CropSpec) -> CropRect:
    """Random-resized-crop rectangle: area fraction in [scale_lo, scale_hi], aspect in [3/4, 4/3]."""
    area = height * width
    for attempt in range(MAX_CROP_TRIES):
        target = area * rng.uniform(spec.scale_lo, spec.scale_hi)
        ratio = math.exp(rng.uniform(*LOG_RATIO))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return CropRect(top, left, h, w)
        logger.debug("Crop attempt %d rejected: %dx%d in %dx%d", attempt, h, w, height, width)
    raise ViewError(f"No valid {spec.kind} crop in {MAX_CROP_TRIES} tries for a {height}x{width} image")


def _companion(sample: SceneSample, companion: str) -> np.ndarray:
    if companion == "thermal":
        if sample.thermal is None:
            raise ValueError("Sample has no thermal channel")
        return sample.thermal
    return sample.depth_sparse


def render_view(
    sample: SceneSample,
    rect: CropRect,
    flip: bool,
    out_size: int,
    kind: str = "global",
    resize_mode: str = "bilinear",
    companion: str = "depth",
) -> PairedView:
    """Crop both streams at ``rect``, flip both if ``flip``, then resample."""
    window = (slice(rect.top, rect.top + rect.height), slice(rect.left, rect.left + rect.width))
    rgb = sample.rgb[window]
    mod = _companion(sample, companion)[window]
    if flip:
        rgb, mod = rgb[:, ::-1], mod[:, ::-1]
    rgb_view = resize(rgb, out_size, resize_mode)
    if companion == "depth":
        mod_view = pool_depth(mod, out_size)
    else:
        mod_view = resize(mod[..., None], out_size, resize_mode)[..., 0]
    return PairedView(rgb_view, mod_view[..., None], rect, flip, kind)


def clean_view(sample: SceneSample, size: int, companion: str = "depth") -> PairedView:
    """Full frame, no flip, no photometric ops."""
    rect = CropRect(0, 0, sample.size, sample.size)
    return render_view(sample, rect, False, size, "global", "bilinear", companion)


def make_views(
    sample: SceneSample,
    n_global: int,
    n_local: int,
    seed: int,
    global_spec: CropSpec,
    local_spec: CropSpec,
    photometric_ops: bool = True,
    resize_mode: str = "bilinear",
    companion: str = "depth",
) -> ViewSet:
    if n_global < 1:
        raise ValueError(f"Need at least one global view, got n_global={n_global}")
    if n_local < 0:
        raise ValueError(f"n_local must be >= 0, got {n_local}")
    children = np.random.SeedSequence([sample.seed, seed]).spawn(n_global + n_local)
    height, width = sample.rgb.shape[:2]
    views = ViewSet(globals=[], locals=[])
    plan = [(global_spec, i) for i in range(n_global)] + [(local_spec, i) for i in range(n_local)]
    for (spec, index), child in zip(plan, children):
        rng = np.random.default_rng(child)
        rect = sample_crop(rng, height, width, spec)
        flip = bool(rng.random() < 0.5)
        view = render_view(sample, rect, flip, spec.out_size, spec.kind, resize_mode, companion)
        if photometric_ops:
            view.rgb = photometric(view.rgb, rng, spec.kind, index)
        (views.globals if spec.kind == "global" else views.locals).append(view)
    return views


def make_views_many(
    samples: Sequence[SceneSample],
    seed: int,
    n_global: int,
    n_local: int,
    global_spec: CropSpec,
    local_spec: CropSpec,
    photometric_ops: bool = True,
    companion: str = "depth",
    num_workers: int = 0,
) -> list[ViewSet]:
    """ViewSets in ``samples`` order; the worker count never changes the result."""

    def one(sample: SceneSample) -> ViewSet:
        return make_views(
            sample, n_global, n_local, seed, global_spec, local_spec,
            photometric_ops, companion=companion,
        )

    if num_workers <= 0:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        return list(pool.map(one, samples))


def collate(viewsets: Sequence[ViewSet]) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Per view position: (kind, rgb (B, S, S, 3), mod (B, S, S, 1)), globals first."""
    first = viewsets[0]
    out = []
    for kind, count in (("global", len(first.globals)), ("local", len(first.locals))):
        for i in range(count):
            picked = [(vs.globals if kind == "global" else vs.locals)[i] for vs in viewsets]
            out.append((
                kind,
                np.stack([v.rgb for v in picked]),
                np.stack([v.mod for v in picked]),
            ))
    return out
