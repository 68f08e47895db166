"""FastMCP server: train / probe / profile tools wired to the run entry points."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

from fastmcp import FastMCP

from . import profiler, train
from .config import load_config
from .errors import FuseJepaError

logger = logging.getLogger(__name__)

mcp = FastMCP(
    "fusejepa",
    instructions="Train, probe and profile a fusion-token multimodal JEPA encoder on synthetic scenes.",
)


def _overrides(seed: int | None, out_dir: str | None, steps: int | None) -> dict[str, Any]:
    return {"seed": seed, "out_dir": out_dir, "steps": steps}


# ---------------------------------------------------------------------------
# Tool handlers (plain async functions, testable without MCP)
# ---------------------------------------------------------------------------


async def _train(
    config_path: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    steps: int | None = None,
) -> dict:
    """Run SSL training and return the final losses and checkpoint path."""
    try:
        run = load_config(config_path, **_overrides(seed, out_dir, steps))
        result = await asyncio.to_thread(train.train_run, run)
    except (FuseJepaError, ValueError) as e:
        return {"error": str(e)}
    last = result.history[-1] if result.history else None
    return {
        "out_dir": str(result.out_dir),
        "steps": len(result.history),
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
        "final": asdict(last) if last else None,
        "initial_loss": result.history[0].loss_total if result.history else None,
    }


async def _probe(
    checkpoint: str | None = None,
    config_path: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
) -> dict:
    """Train frozen probes on a checkpoint (or a fresh encoder when omitted)."""
    try:
        run = load_config(config_path, **_overrides(seed, out_dir, None))
        ckpt = Path(checkpoint) if checkpoint else None
        result = await asyncio.to_thread(train.probe_run, run, ckpt)
    except (FuseJepaError, ValueError, RuntimeError) as e:
        return {"error": str(e)}
    return {
        "seg_miou": result.metrics.seg_miou,
        "depth_mae": result.metrics.depth_mae,
        "validation_passes": len(result.rows),
    }


async def _profile(
    config_path: str | None = None,
    steps: int = 1,
    modes: list[str] | None = None,
    out_dir: str | None = None,
) -> dict:
    """Profile attention and SIGReg cost; steps=0 reports formulas only."""
    try:
        run = load_config(config_path, **_overrides(None, out_dir, None))
        reports = await asyncio.to_thread(
            profiler.profile_command, run, steps, tuple(modes or ("pruned", "persistent")),
        )
    except (FuseJepaError, ValueError) as e:
        return {"error": str(e)}
    return {
        "reports": [
            {
                "mode": r.mode,
                "attn_madds": r.attn_madds,
                "total_madds": r.total_madds,
                "sigreg_madds": r.sigreg_madds,
                "params": r.params,
                "peak_bytes": r.peak_bytes,
                "tokens": [layer.tokens for layer in r.layers],
            }
            for r in reports
        ],
        "csv": str(Path(run.out_dir) / "profile.csv"),
    }


# ---------------------------------------------------------------------------
# Register tools on the MCP server (thin wrappers preserve docstrings)
# ---------------------------------------------------------------------------


@mcp.tool()
async def fusejepa_train(
    config_path: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    steps: int | None = None,
) -> dict:
    """Run self-supervised training.

    Args:
        config_path: key=value config file (defaults apply when omitted).
        seed: Overrides the config seed.
        out_dir: Overrides the output directory (metrics.csv, checkpoints).
        steps: Overrides the number of training steps.
    """
    return await _train(config_path=config_path, seed=seed, out_dir=out_dir, steps=steps)


@mcp.tool()
async def fusejepa_probe(
    checkpoint: str | None = None,
    config_path: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
) -> dict:
    """Train segmentation and depth probes on frozen fusion-token features.

    Args:
        checkpoint: Checkpoint directory from fusejepa_train; omit to probe a random encoder.
        config_path: key=value config file.
        seed: Overrides the config seed.
        out_dir: Where probe_metrics.csv is written.
    """
    return await _probe(checkpoint=checkpoint, config_path=config_path, seed=seed, out_dir=out_dir)


@mcp.tool()
async def fusejepa_profile(
    config_path: str | None = None,
    steps: int = 1,
    modes: list[str] | None = None,
    out_dir: str | None = None,
) -> dict:
    """Count attention, encoder and SIGReg multiply-adds per routing mode.

    Args:
        config_path: key=value config file.
        steps: Training steps to instrument; 0 reports the analytic formulas only.
        modes: Routing modes to compare (default pruned and persistent).
        out_dir: Where profile.csv is written.
    """
    return await _profile(config_path=config_path, steps=steps, modes=modes, out_dir=out_dir)
