"""Frozen-feature probes: linear segmentation and a light depth-map head.

Features are the final-layer fusion grid, extracted under ``no_grad`` so no
gradient can reach the encoder while the probes train.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import gradcore as gc
from .errors import ShapeError
from .gradcore import DiffArray
from .nn import AdamW, Linear, Module, interp_matrix, step_lr
from .synthscene import R_MAX
from .types import NUM_CLASSES, ProbeMetrics, SceneSample
from .viewpipe import clean_view, resize

if TYPE_CHECKING:
    from .config import RunConfig
    from .fusionvit import FusionViT

logger = logging.getLogger(__name__)

UPSCALE = 4
DEPTH_CHANNELS = 16
PROBE_CSV_FIELDS = ("step", "epoch", "seg_miou", "depth_mae")


# ---------------------------------------------------------------------------
# Differentiable rearrangements
# ---------------------------------------------------------------------------


def depth_to_space(x: DiffArray, r: int = UPSCALE) -> DiffArray:
    """(B, H, W, C*r*r) -> (B, H*r, W*r, C); channel c*r*r + i*r + j lands at offset (i, j)."""
    batch, h, w, ch = x.shape
    if ch % (r * r) != 0:
        raise ShapeError(f"depth_to_space: {ch} channels not divisible by r^2={r * r}")
    c = ch // (r * r)
    x = gc.reshape(x, (batch, h, w, c, r, r))
    x = gc.transpose(x, (0, 1, 4, 2, 5, 3))
    return gc.reshape(x, (batch, h * r, w * r, c))


def bilinear_resize(x: DiffArray, out_size: int) -> DiffArray:
    """(B, H, W, C) -> (B, out, out, C) with half-pixel bilinear weights."""
    _, h, w, _ = x.shape
    if (h, w) == (out_size, out_size):
        return x
    rows = DiffArray(interp_matrix(out_size, h).astype(x.dtype))
    cols = DiffArray(interp_matrix(out_size, w).T.astype(x.dtype))
    planes = gc.transpose(x, (0, 3, 1, 2))  # (B, C, H, W)
    planes = gc.matmul(gc.matmul(rows, planes), cols)
    return gc.transpose(planes, (0, 2, 3, 1))


def conv3x3_indices(h: int, w: int) -> np.ndarray:
    """Flat neighbor indices for a zero-padded 3x3 window; ``h*w`` marks padding."""
    rows, cols = np.mgrid[0:h, 0:w]
    idx = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = rows + dr, cols + dc
            valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            idx.append(np.where(valid, r * w + c, h * w))
    return np.stack(idx, axis=-1).reshape(-1)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class LinearSegProbe(Module):
    """1x1 projection -> depth-to-space -> bilinear resize. Strictly linear."""

    def __init__(self, dim: int, num_classes: int = NUM_CLASSES, r: int = UPSCALE, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 11])
        self.num_classes = num_classes
        self.r = r
        self.proj = Linear(dim, num_classes * r * r, rng, dtype)

    def __call__(self, grid: DiffArray, out_size: int | None = None) -> DiffArray:
        logits = depth_to_space(self.proj(grid), self.r)
        return logits if out_size is None else bilinear_resize(logits, out_size)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.linear = Linear(9 * c_in, c_out, rng, dtype)

    def __call__(self, x: DiffArray) -> DiffArray:
        batch, h, w, c = x.shape
        flat = gc.reshape(x, (batch, h * w, c))
        pad = DiffArray(np.zeros((batch, 1, c), dtype=x.dtype))
        flat = gc.concat([flat, pad], axis=1)
        patches = gc.gather(flat, conv3x3_indices(h, w), axis=1)  # (B, h*w*9, c)
        patches = gc.reshape(patches, (batch, h, w, 9 * c))
        return self.linear(patches)


class DepthMapProbe(Module):
    """1x1 to 16*r*r -> depth-to-space -> 3x3 refine -> 1x1 head -> softplus.

    With ``out_size`` the map is bilinearly resized onto the ground-truth grid.
    Bilinear weights are non-negative, so the output stays positive.
    """

    def __init__(self, dim: int, r: int = UPSCALE, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 12])
        self.r = r
        self.proj = Linear(dim, DEPTH_CHANNELS * r * r, rng, dtype)
        self.refine = Conv3x3(DEPTH_CHANNELS, DEPTH_CHANNELS, rng, dtype)
        self.head = Linear(DEPTH_CHANNELS, 1, rng, dtype)

    def __call__(self, grid: DiffArray, out_size: int | None = None) -> DiffArray:
        x = depth_to_space(self.proj(grid), self.r)
        x = gc.gelu(self.refine(x))
        out = gc.softplus(self.head(x))
        if out_size is not None:
            out = bilinear_resize(out, out_size)
        batch, h, w, _ = out.shape
        return gc.reshape(out, (batch, h, w))


def seg_probe(probe: LinearSegProbe, grid: DiffArray, out_size: int | None = None) -> DiffArray:
    return probe(grid, out_size)


def depth_probe(probe: DepthMapProbe, grid: DiffArray, out_size: int | None = None) -> DiffArray:
    return probe(grid, out_size)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def compute_metrics(
    pred: np.ndarray,
    target: np.ndarray,
    kind: str,
    r_max: float = R_MAX,
    num_classes: int = NUM_CLASSES,
) -> ProbeMetrics:
    """Seg mIoU over classes present in the target, or depth MAE in meters.

    Seg ``pred`` may be a class map or logits with a trailing class axis.
    Depth ``pred`` and ``target`` are normalized by ``r_max``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if target.size == 0:
        raise ValueError("compute_metrics: empty target")
    if kind == "seg":
        if pred.ndim == target.ndim + 1:
            pred = pred.argmax(axis=-1)
        if pred.shape != target.shape:
            raise ShapeError(f"compute_metrics: pred {pred.shape} != target {target.shape}")
        ious = []
        for c in range(num_classes):
            in_target = target == c
            if not in_target.any():
                continue
            in_pred = pred == c
            ious.append((in_target & in_pred).sum() / (in_target | in_pred).sum())
        return ProbeMetrics(seg_miou=float(np.mean(ious)))
    if kind == "depth":
        if pred.shape != target.shape:
            raise ShapeError(f"compute_metrics: pred {pred.shape} != target {target.shape}")
        mae = np.abs(pred.astype(np.float64) - target.astype(np.float64)).mean() * r_max
        return ProbeMetrics(depth_mae=float(mae))
    raise ValueError(f"Unknown metric kind={kind!r}; expected 'seg' or 'depth'")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ProbeData:
    grid: np.ndarray  # (M, g, g, D) frozen fusion features
    seg: np.ndarray  # (M, S, S) class ids at view size
    depth: np.ndarray  # (M, S, S) normalized dense depth, every scene pixel


@dataclass
class ProbeResult:
    metrics: ProbeMetrics
    encoder_grad_abs: float
    rows: list[dict]


def encoder_grad_abs(encoder: Module) -> float:
    return float(sum(np.abs(p.grad).sum() for p in encoder.parameters() if p.grad is not None))


def extract_features(
    encoder: FusionViT,
    samples: list[SceneSample],
    companion: str = "depth",
    r_max: float = R_MAX,
    batch_size: int = 16,
) -> ProbeData:
    size = encoder.cfg.image_size
    grid_side = encoder.cfg.grid
    grids, segs, depths = [], [], []
    with gc.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            views = [clean_view(s, size, companion) for s in chunk]
            out = encoder.encode_batch(np.stack([v.rgb for v in views]), np.stack([v.mod for v in views]))
            fusion = out.fusion.values
            grids.append(fusion.reshape(len(chunk), grid_side, grid_side, -1))
    for s in samples:
        segs.append(resize(s.seg[..., None], size, "nearest")[..., 0].astype(np.int64))
        depths.append(np.clip(s.depth_dense / r_max, 0.0, 1.0).astype(np.float32))
    return ProbeData(np.concatenate(grids), np.stack(segs), np.stack(depths))


def _seg_loss(logits: DiffArray, target: np.ndarray, num_classes: int) -> DiffArray:
    onehot = np.eye(num_classes, dtype=logits.dtype)[target]
    picked = gc.sum_(gc.log_softmax(logits, axis=-1) * DiffArray(onehot), axis=-1)
    return gc.scalar_mul(gc.mean(picked), -1.0)


def _depth_loss(pred: DiffArray, target: np.ndarray) -> DiffArray:
    return gc.mean(gc.square(pred - DiffArray(target.astype(pred.dtype))))


def evaluate(
    seg: LinearSegProbe,
    depth: DepthMapProbe,
    data: ProbeData,
    r_max: float = R_MAX,
    batch_size: int = 16,
) -> ProbeMetrics:
    seg_pred, depth_pred = [], []
    with gc.no_grad():
        for start in range(0, len(data.grid), batch_size):
            grid = DiffArray(data.grid[start : start + batch_size])
            seg_pred.append(seg(grid, data.seg.shape[1]).values.argmax(axis=-1))
            depth_pred.append(depth(grid, data.depth.shape[1]).values)
    miou = compute_metrics(np.concatenate(seg_pred), data.seg, "seg").seg_miou
    mae = compute_metrics(np.concatenate(depth_pred), data.depth, "depth", r_max).depth_mae
    return ProbeMetrics(seg_miou=miou, depth_mae=mae)


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PROBE_CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def train_probes(
    encoder: FusionViT,
    train: ProbeData,
    val: ProbeData,
    run: RunConfig,
    csv_path: Path | None = None,
) -> ProbeResult:
    """Train both heads on frozen features, validating every ``val_every`` steps and at the end."""
    dim = train.grid.shape[-1]
    dtype = np.dtype(run.dtype)
    seg = LinearSegProbe(dim, seed=run.seed, dtype=dtype)
    depth = DepthMapProbe(dim, seed=run.seed, dtype=dtype)
    params = seg.parameters() + depth.parameters()
    opt = AdamW(params, lr=run.probe_lr, betas=(run.beta1, run.beta2), weight_decay=run.weight_decay)
    encoder.zero_grad()

    rows: list[dict] = []
    step = 0
    metrics = ProbeMetrics()

    def validate(epoch: int) -> ProbeMetrics:
        m = evaluate(seg, depth, val, run.r_max, run.probe_batch_size)
        rows.append({"step": step, "epoch": epoch, "seg_miou": f"{m.seg_miou:.6f}", "depth_mae": f"{m.depth_mae:.6f}"})
        logger.info("Probe validation step=%d epoch=%d miou=%.4f mae=%.3fm", step, epoch, m.seg_miou, m.depth_mae)
        return m

    for epoch in range(run.probe_epochs):
        lr = step_lr(epoch, run.probe_lr)
        order = np.random.default_rng([run.seed, epoch, 13]).permutation(len(train.grid))
        for start in range(0, len(order), run.probe_batch_size):
            idx = order[start : start + run.probe_batch_size]
            grid = DiffArray(train.grid[idx].astype(dtype))
            opt.zero_grad()
            loss = _seg_loss(seg(grid, train.seg.shape[1]), train.seg[idx], seg.num_classes)
            loss = loss + _depth_loss(depth(grid, train.depth.shape[1]), train.depth[idx])
            gc.backward(loss)
            opt.step(lr)
            step += 1
            if step % run.val_every == 0:
                metrics = validate(epoch)
        if not rows or rows[-1]["step"] != step:
            metrics = validate(epoch)

    frozen = encoder_grad_abs(encoder)
    if frozen != 0.0:
        raise RuntimeError(f"Encoder received gradient during probe training: sum |grad| = {frozen}")
    if csv_path is not None:
        _write_rows(csv_path, rows)
    return ProbeResult(metrics, frozen, rows)
