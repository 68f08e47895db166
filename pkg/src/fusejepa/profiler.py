"""Multiply-add accounting: analytic formulas and instrumented training steps.

Analytic counts cover matrix products only. Instrumented counts come from a
``gradcore.Graph`` recorder over the forward pass (backward is not counted).
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .config import RunConfig
from .fusionvit import EncoderConfig, make_mask
from .train import Trainer
from .types import CostReport, LayerCost
from .viewpipe import collate

logger = logging.getLogger(__name__)

# sigreg_cost = SIGREG_PROJ * B*K*d + SIGREG_KNOT * B*K*T
# (projection matmul; knot multiply, cos, sin and two batch means per (b, k, t))
SIGREG_PROJ = 1
SIGREG_KNOT = 5

PROFILE_FIELDS = (
    "mode", "layer", "tokens", "attn_madds", "total_madds", "params", "peak_bytes",
    "minimal_attn_madds", "analytic_madds", "ratio",
)


# ---------------------------------------------------------------------------
# Formulas
# ---------------------------------------------------------------------------


def score_mix_cost(tokens: int, dim: int) -> int:
    """QK^T plus AV: 2 * t^2 * D."""
    return 2 * tokens * tokens * dim


def attention_cost(tokens: int, dim: int, heads: int = 1) -> int:
    """One masked self-attention layer: 2*t^2*D score/mix plus 4*t*D^2 projections.

    Independent of the head count; ``heads`` is accepted for signature symmetry.
    """
    if tokens < 1:
        raise ValueError(f"tokens must be >= 1, got {tokens}")
    if dim < 1 or heads < 1 or dim % heads != 0:
        raise ValueError(f"Invalid D={dim} heads={heads}")
    return score_mix_cost(tokens, dim) + 4 * tokens * dim * dim


def minimal_attention_cost(queries: int, keys: int, dim: int) -> int:
    """Attention where only ``queries`` of the ``keys`` tokens need outputs."""
    return 2 * queries * keys * dim + 2 * queries * dim * dim + 2 * keys * dim * dim


def sigreg_cost(batch: int, num_directions: int, num_knots: int, dim: int) -> int:
    if min(batch, num_directions, num_knots, dim) < 1:
        raise ValueError(
            f"sigreg_cost needs all of B, K, T, d >= 1; got B={batch} K={num_directions} "
            f"T={num_knots} d={dim}"
        )
    return SIGREG_PROJ * batch * num_directions * dim + SIGREG_KNOT * batch * num_directions * num_knots


def pruning_ratio(n: int) -> float:
    """Persistent over pruned score/mix work for layers >= 1: ((1+3N)/(1+N))^2."""
    return ((1 + 3 * n) / (1 + n)) ** 2


def layer_tokens(mode: str, layer: int, n: int) -> int:
    return make_mask(layer, mode, n).shape[0]


def analytic_layers(cfg: EncoderConfig, mode: str, n: int | None = None) -> list[LayerCost]:
    n = cfg.n_patches if n is None else n
    dim = cfg.embed_dim
    layers = []
    for k in range(cfg.depth):
        t = layer_tokens(mode, k, n)
        analytic = attention_cost(t, dim, cfg.heads)
        minimal = analytic
        if mode != "persistent" and k == 0:
            minimal = minimal_attention_cost(1 + n, t, dim)
        layers.append(LayerCost(k, t, analytic, minimal, analytic))
    return layers


def encoder_forward_cost(cfg: EncoderConfig, mode: str, n: int | None = None) -> int:
    """Matmul multiply-adds of one image through stems, blocks and projector."""
    n = cfg.n_patches if n is None else n
    dim, p2 = cfg.embed_dim, cfg.patch_size**2
    stems = n * p2 * (cfg.rgb_channels + cfg.mod_channels) * dim
    if n != cfg.n_patches:
        stems += 4 * n * cfg.n_patches * dim  # F, C, M positions and the fusion bank resampled
    blocks = 0
    for layer in analytic_layers(cfg, mode, n):
        blocks += layer.analytic_madds + 2 * cfg.mlp_ratio * layer.tokens * dim * dim
    projector = dim * dim + dim * cfg.proj_dim
    return stems + blocks + projector


def param_count(cfg: EncoderConfig) -> int:
    d, n, p2, r = cfg.embed_dim, cfg.n_patches, cfg.patch_size**2, cfg.mlp_ratio
    stems = (p2 * cfg.rgb_channels + 1) * d + (p2 * cfg.mod_channels + 1) * d
    tokens = 3 * d + n * d + (1 + 3 * n) * d
    block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (r * d * d + r * d) + (r * d * d + d)
    projector = d * d + d + d * cfg.proj_dim + cfg.proj_dim
    return stems + tokens + cfg.depth * block + 2 * d + projector


def _passes_per_step(run: RunConfig) -> int:
    return 3 if run.objective == "three-pass" else 1


def analytic_step_cost(run: RunConfig, mode: str) -> tuple[int, int]:
    """(encoder + projector madds, sigreg madds) of one training step's forward pass."""
    cfg = EncoderConfig.from_run(run)
    local_n = (run.local_size // run.patch_size) ** 2
    per_pass = run.n_global * encoder_forward_cost(cfg, mode) + run.n_local * encoder_forward_cost(cfg, mode, local_n)
    encoder = run.batch_size * per_pass * _passes_per_step(run)
    views = run.n_global + run.n_local
    sig = sigreg_cost(run.batch_size * views, run.num_directions, run.num_knots, run.proj_dim)
    return encoder, sig * _passes_per_step(run)


# ---------------------------------------------------------------------------
# Instrumented runs
# ---------------------------------------------------------------------------


def counted_attention(trainer: Trainer, mode: str) -> list[int]:
    """Per-image matmul madds under each ``layer{k}.attn`` scope for one global-view batch."""
    viewsets = trainer.views_for_step(0)
    _, rgb, mod = collate(viewsets)[0]
    with gc.no_grad(), gc.Graph() as graph:
        trainer.model.encode_batch(rgb, mod, mode)
    batch = rgb.shape[0]
    return [
        graph.madds(prefix=f"layer{k}.attn", kinds={"matmul"}) // batch
        for k in range(trainer.model.cfg.depth)
    ]


def profile_run(run: RunConfig, steps: int = 1, mode: str | None = None) -> CostReport:
    """Cost report for ``mode``; ``steps=0`` skips execution and reports formulas only."""
    mode = mode or run.routing_mode
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    run = run.model_copy(update={"routing_mode": mode})
    cfg = EncoderConfig.from_run(run)
    layers = analytic_layers(cfg, mode)

    if steps == 0:
        encoder, sig = analytic_step_cost(run, mode)
        return CostReport(mode, layers, encoder + sig, sig, param_count(cfg), 0, steps=0, encoder_passes=0)

    trainer = Trainer(run.model_copy(update={"steps": max(run.steps, steps)}))
    for layer, counted in zip(layers, counted_attention(trainer, mode)):
        layer.attn_madds = counted

    trainer.encoder_passes = 0
    base = trainer.model.param_bytes()
    total = sig = peak = 0
    for step in range(steps):
        with gc.Graph() as graph:
            trainer.train_step(step)
        total += graph.madds()
        sig += graph.madds(prefix="sigreg")
        peak = max(peak, graph.peak_live_bytes(base))
    report = CostReport(
        mode=mode,
        layers=layers,
        total_madds=total,
        sigreg_madds=sig,
        params=trainer.model.num_parameters(),
        peak_bytes=peak,
        steps=steps,
        encoder_passes=trainer.encoder_passes,
    )
    logger.info(
        "Profiled mode=%s steps=%d total=%d attn=%d peak=%dB",
        mode, steps, report.total_madds, report.attn_madds, report.peak_bytes,
    )
    return report


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def profile_rows(reports: list[CostReport], n: int, dim: int) -> list[dict]:
    rows = []
    for report in reports:
        for layer in report.layers:
            persistent_tokens = layer_tokens("persistent", layer.layer, n)
            ratio = score_mix_cost(persistent_tokens, dim) / score_mix_cost(layer.tokens, dim)
            rows.append({
                "mode": report.mode,
                "layer": layer.layer,
                "tokens": layer.tokens,
                "attn_madds": layer.attn_madds,
                "total_madds": report.total_madds,
                "params": report.params,
                "peak_bytes": report.peak_bytes,
                "minimal_attn_madds": layer.minimal_attn_madds,
                "analytic_madds": layer.analytic_madds,
                "ratio": f"{ratio:.4f}",
            })
    return rows


def write_profile_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PROFILE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def profile_command(
    run: RunConfig,
    steps: int = 1,
    modes: tuple[str, ...] = ("pruned", "persistent"),
) -> list[CostReport]:
    """Profile each mode and write ``profile.csv`` under ``run.out_dir``."""
    reports = [profile_run(run, steps, mode) for mode in modes]
    cfg = EncoderConfig.from_run(run)
    rows = profile_rows(reports, cfg.n_patches, cfg.embed_dim)
    write_profile_csv(Path(run.out_dir) / "profile.csv", rows)
    if "pruned" in modes and "persistent" in modes:
        by_mode = {r.mode: r for r in reports}
        attn_ratio = by_mode["persistent"].attn_madds / max(1, by_mode["pruned"].attn_madds)
        logger.info("persistent/pruned attention madds: %.3f", attn_ratio)
    return reports


def madds_slope(xs: list[float], ys: list[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
