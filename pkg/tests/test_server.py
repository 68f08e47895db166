"""Tests for server.py tool handlers against tiny runs."""

from __future__ import annotations

import pytest

from fusejepa import server


@pytest.mark.asyncio
class TestTrainTool:
    async def test_basic(self, tiny_config_file, tmp_path):
        result = await server._train(str(tiny_config_file), out_dir=str(tmp_path / "t"), steps=2)
        assert result["steps"] == 2
        assert result["final"]["step"] == 1
        assert result["checkpoint"].endswith("checkpoint")
        assert result["initial_loss"] > 0.0

    async def test_missing_config(self, tmp_path):
        result = await server._train(str(tmp_path / "nope.cfg"))
        assert "error" in result
        assert "not found" in result["error"]

    async def test_invalid_override(self, tiny_config_file):
        result = await server._train(str(tiny_config_file), steps=-1)
        assert "error" in result


@pytest.mark.asyncio
class TestProbeTool:
    async def test_fresh_encoder(self, tiny_config_file, tmp_path):
        result = await server._probe(config_path=str(tiny_config_file), out_dir=str(tmp_path / "p"))
        assert 0.0 <= result["seg_miou"] <= 1.0
        assert result["depth_mae"] >= 0.0
        assert result["validation_passes"] >= 1
        assert (tmp_path / "p" / "probe_metrics.csv").exists()

    async def test_missing_checkpoint(self, tiny_config_file, tmp_path):
        result = await server._probe(str(tmp_path / "missing"), str(tiny_config_file))
        assert "error" in result


@pytest.mark.asyncio
class TestProfileTool:
    async def test_analytic(self, tiny_config_file, tmp_path):
        result = await server._profile(str(tiny_config_file), steps=0, out_dir=str(tmp_path / "prof"))
        assert [r["mode"] for r in result["reports"]] == ["pruned", "persistent"]
        assert result["reports"][0]["tokens"] == [13, 5]
        assert result["reports"][1]["tokens"] == [13, 13]
        assert result["csv"].endswith("profile.csv")

    async def test_single_mode(self, tiny_config_file, tmp_path):
        result = await server._profile(
            str(tiny_config_file), steps=0, modes=["persistent"], out_dir=str(tmp_path / "prof"),
        )
        assert len(result["reports"]) == 1

    async def test_unknown_mode(self, tiny_config_file, tmp_path):
        result = await server._profile(
            str(tiny_config_file), steps=0, modes=["late"], out_dir=str(tmp_path / "prof"),
        )
        assert "error" in result
