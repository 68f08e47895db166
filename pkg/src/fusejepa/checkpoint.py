"""Checkpoint directories: ``manifest.txt`` + ``params.bin`` + ``config.txt``.

``params.bin`` is the concatenation of every parameter as little-endian f32.
The manifest lists ``format_version``, ``step`` and one
``param <name> <shape> <offset> <count>`` line per parameter, where shape is
``AxBxC`` (``-`` for scalars) and offset is in bytes.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import CheckpointError
from .nn import Module

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
PARAMS = "params.bin"
CONFIG = "config.txt"


@dataclass
class Checkpoint:
    step: int
    state: dict[str, np.ndarray]
    config: RunConfig | None
    format_version: int = FORMAT_VERSION


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path: Path, model: Module, step: int, config: RunConfig | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version {FORMAT_VERSION}", f"step {step}"]
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        blob = np.ascontiguousarray(p.values, dtype="<f4").tobytes()
        lines.append(f"param {name} {_shape_text(p.shape)} {offset} {p.size}")
        blobs.append(blob)
        offset += len(blob)
    _write_atomic(path / PARAMS, b"".join(blobs))
    if config is not None:
        _write_atomic(path / CONFIG, dump_config(config).encode())
    _write_atomic(path / MANIFEST, ("\n".join(lines) + "\n").encode())
    logger.info("Saved checkpoint step=%d to %s (%d bytes)", step, path, offset)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    manifest, params = path / MANIFEST, path / PARAMS
    if not manifest.exists() or not params.exists():
        raise CheckpointError(f"No checkpoint at {path} (need {MANIFEST} and {PARAMS})")
    raw = params.read_bytes()
    version, step = None, None
    state: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "format_version":
                version = int(parts[1])
            elif parts[0] == "step":
                step = int(parts[1])
            elif parts[0] == "param" and len(parts) == 5:
                name, shape, offset, count = parts[1], _parse_shape(parts[2]), int(parts[3]), int(parts[4])
                if name in state:
                    raise CheckpointError(f"{manifest}:{lineno}: duplicate parameter {name!r}")
                end = offset + 4 * count
                if end > len(raw) or int(np.prod(shape)) != count:
                    raise CheckpointError(f"{manifest}:{lineno}: blob for {name!r} is out of range or misshapen")
                state[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
            else:
                raise CheckpointError(f"{manifest}:{lineno}: unrecognized line {line!r}")
        except CheckpointError:
            raise
        except (ValueError, IndexError) as e:
            raise CheckpointError(f"{manifest}:{lineno}: malformed line {line!r}") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format_version={version}; expected {FORMAT_VERSION}")
    if step is None:
        raise CheckpointError(f"{manifest}: missing step")
    config = load_config(path / CONFIG) if (path / CONFIG).exists() else None
    return Checkpoint(step, state, config, version)


def restore(model: Module, path: Path) -> Checkpoint:
    """Load ``path`` into ``model`` in place; shape or name mismatches raise CheckpointError."""
    ckpt = load_checkpoint(path)
    model.load_state_dict(ckpt.state)
    return ckpt
