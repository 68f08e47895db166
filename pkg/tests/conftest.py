"""Shared fixtures for tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fusejepa.config import RunConfig, dump_config
from fusejepa.fusionvit import EncoderConfig, FusionViT
from fusejepa.synthscene import gen_scene
from fusejepa.types import SceneSample


@pytest.fixture
def tiny_run(tmp_path: Path) -> RunConfig:
    """16 px images, 8 px patches: N = 4 global, N = 1 local."""
    return RunConfig(
        seed=0,
        out_dir=tmp_path / "run",
        steps=3,
        batch_size=4,
        log_wall_time=False,
        checkpoint_every=100,
        num_directions=4,
        num_knots=8,
        image_size=16,
        local_size=8,
        patch_size=8,
        embed_dim=8,
        depth=2,
        heads=2,
        mlp_ratio=2,
        proj_dim=4,
        n_global=2,
        n_local=2,
        scene_size=16,
        dataset_size=8,
        probe_epochs=1,
        probe_batch_size=4,
        probe_train_size=8,
        probe_val_size=4,
        val_every=1,
    )


@pytest.fixture
def tiny_config_file(tmp_path: Path, tiny_run: RunConfig) -> Path:
    path = tmp_path / "tiny.cfg"
    path.write_text(dump_config(tiny_run))
    return path


@pytest.fixture
def encoder_cfg() -> EncoderConfig:
    return EncoderConfig(image_size=16, patch_size=8, embed_dim=8, depth=2, heads=2, proj_dim=4, dtype="float64")


@pytest.fixture
def encoder(encoder_cfg: EncoderConfig) -> FusionViT:
    return FusionViT(encoder_cfg, seed=0)


@pytest.fixture
def image_pair() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(0)
    return rng.random((3, 16, 16, 3)), rng.random((3, 16, 16, 1))


@pytest.fixture
def scene() -> SceneSample:
    return gen_scene(seed=5, size=32)
