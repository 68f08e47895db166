"""Fusion-token ViT encoder.

Token layout before pruning is [CLS, F(1..N), C(1..N), M(1..N)]. Fusion token
F(i) reads the camera patch C(i) and companion patch M(i) through masked
attention. In pruned mode the 2N modality tokens are dropped after layer 0;
in persistent mode they stay and the pairing mask applies at every layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, MaskError, ShapeError
from .gradcore import DiffArray
from .nn import MLP, LayerNorm, Linear, Module, grid_interp_matrix, param, trunc_normal
from .types import (
    ROLE_CAM,
    ROLE_CLS,
    ROLE_FUSION,
    ROLE_MOD,
    AttentionMask,
    TokenRole,
    TokenSequence,
)

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

ROUTING_MODES = ("pruned", "persistent", "rgb-only", "mod-only")
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    routing_mode: str = "pruned"
    proj_dim: int = 16
    mlp_ratio: int = 4
    rgb_channels: int = 3
    mod_channels: int = 1
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size={self.image_size} not divisible by patch_size={self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"Unknown routing_mode={self.routing_mode!r}. Valid: {ROUTING_MODES}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @classmethod
    def from_run(cls, run: RunConfig) -> EncoderConfig:
        return cls(
            image_size=run.image_size,
            patch_size=run.patch_size,
            embed_dim=run.embed_dim,
            depth=run.depth,
            heads=run.heads,
            routing_mode=run.routing_mode,
            proj_dim=run.proj_dim,
            mlp_ratio=run.mlp_ratio,
            dtype=run.dtype,
        )


@dataclass
class EncoderOutput:
    cls: DiffArray  # (B, D)
    fusion: DiffArray  # (B, N, D)
    token_counts: list[int] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)  # per layer (B, heads, t, t)
    roles: list[list[TokenRole]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Token layout and masks
# ---------------------------------------------------------------------------


def token_roles(n: int) -> list[TokenRole]:
    roles = [TokenRole(ROLE_CLS)]
    for kind in (ROLE_FUSION, ROLE_CAM, ROLE_MOD):
        roles.extend(TokenRole(kind, i) for i in range(1, n + 1))
    return roles


def make_mask(layer: int, mode: str, n: int, depth: int | None = None) -> AttentionMask:
    """Attention admissibility for ``layer`` under routing ``mode`` with N = ``n`` patches.

    rgb-only and mod-only passes route like pruned mode.
    """
    if mode not in ROUTING_MODES:
        raise ConfigError(f"Unknown routing mode={mode!r}. Valid: {ROUTING_MODES}")
    if layer < 0 or (depth is not None and layer >= depth):
        raise ValueError(f"layer={layer} outside [0, {depth})")
    if n < 1:
        raise ValueError(f"Need n >= 1 patches, got {n}")

    pruned = mode != "persistent"
    if pruned and layer >= 1:
        return AttentionMask(layer, mode, np.ones((1 + n, 1 + n), dtype=bool))

    t = 1 + 3 * n
    fus = slice(1, 1 + n)
    cam = slice(1 + n, 1 + 2 * n)
    mod = slice(1 + 2 * n, t)
    idx = np.arange(n)

    allowed = np.zeros((t, t), dtype=bool)
    allowed[0, :] = True
    allowed[:, 0] = True
    allowed[cam, cam] = True
    allowed[mod, mod] = True
    if pruned:
        allowed[1 + idx, 1 + idx] = True
    else:
        allowed[fus, fus] = True
    allowed[1 + idx, 1 + n + idx] = True
    allowed[1 + idx, 1 + 2 * n + idx] = True
    return AttentionMask(layer, mode, allowed)


def prune(seq: TokenSequence) -> TokenSequence:
    """Keep CLS and the fusion tokens; drop the 2N modality tokens."""
    if seq.pruned:
        raise MaskError("prune: sequence was already pruned")
    if seq.mode == "persistent":
        raise MaskError("prune: persistent routing keeps modality tokens")
    n = seq.grid
    if seq.n_tokens != 1 + 3 * n:
        raise ShapeError(f"prune: expected {1 + 3 * n} tokens, got {seq.n_tokens}")
    keep = 1 + n
    tokens = gc.slice_(seq.tokens, (..., slice(0, keep), slice(None)))
    return TokenSequence(tokens, seq.roles[:keep], seq.mode, n, pruned=True)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Attention(Module):
    """Multi-head self-attention with a per-layer boolean mask."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: DiffArray, mask: np.ndarray) -> tuple[DiffArray, np.ndarray]:
        batch, t, dim = x.shape
        dh = dim // self.heads
        qkv = gc.reshape(self.qkv(x), (batch, t, 3, self.heads, dh))
        qkv = gc.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, h, t, dh)
        q, k, v = (gc.slice_(qkv, i) for i in range(3))
        scores = gc.scalar_mul(gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = gc.masked_softmax(scores, mask)
        out = gc.transpose(gc.matmul(weights, v), (0, 2, 1, 3))
        return self.proj(gc.reshape(out, (batch, t, dim))), weights.values


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng, dtype)

    def __call__(self, x: DiffArray, mask: np.ndarray) -> tuple[DiffArray, np.ndarray]:
        with gc.scope("attn"):
            attn_out, weights = self.attn(self.norm1(x), mask)
        x = x + attn_out
        with gc.scope("mlp"):
            x = x + self.mlp(self.norm2(x))
        return x, weights


class FusionTokenBank(Module):
    """One learnable latent per patch position."""

    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = INIT_STD, dtype=np.float32):
        self.init_std = std
        self.tokens = param(trunc_normal(rng, (n, dim), std, dtype))

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


class Projector(MLP):
    """D -> D (GELU) -> d head, applied to CLS embeddings only."""

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__(dim, dim, out_dim, rng, dtype)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


class FusionViT(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype
        p, d, n = cfg.patch_size, cfg.embed_dim, cfg.n_patches
        self.rgb_stem = Linear(p * p * cfg.rgb_channels, d, rng, dtype)
        self.mod_stem = Linear(p * p * cfg.mod_channels, d, rng, dtype)
        self.e_cam = param(trunc_normal(rng, (d,), INIT_STD, dtype))
        self.e_mod = param(trunc_normal(rng, (d,), INIT_STD, dtype))
        self.cls_token = param(trunc_normal(rng, (d,), INIT_STD, dtype))
        self.bank = FusionTokenBank(n, d, rng, INIT_STD, dtype)
        # One slot per token: [CLS, F(N), C(N), M(N)]
        self.pos = param(trunc_normal(rng, (1 + 3 * n, d), INIT_STD, dtype))
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d, dtype)
        self.projector = Projector(d, cfg.proj_dim, rng, dtype)
        logger.debug(
            "FusionViT N=%d D=%d depth=%d mode=%s params=%d",
            n, d, cfg.depth, cfg.routing_mode, self.num_parameters(),
        )

    # -- inputs ------------------------------------------------------------

    def _grid_of(self, image: np.ndarray, channels: int) -> int:
        if image.ndim != 4 or image.shape[1] != image.shape[2] or image.shape[3] != channels:
            raise ShapeError(f"Expected (B, S, S, {channels}) images, got {image.shape}")
        size = image.shape[1]
        if size % self.cfg.patch_size != 0 or size > self.cfg.image_size:
            raise ShapeError(
                f"Image size {size} must be a multiple of patch_size={self.cfg.patch_size} "
                f"and at most image_size={self.cfg.image_size}"
            )
        return size // self.cfg.patch_size

    def _pos_section(self, section: int, grid: int) -> DiffArray:
        """Positional rows for section 0=F, 1=C, 2=M, resampled to ``grid``."""
        n = self.cfg.n_patches
        start = 1 + section * n
        rows = gc.slice_(self.pos, slice(start, start + n))
        return self._resample(rows, grid)

    def _resample(self, rows: DiffArray, grid: int) -> DiffArray:
        if grid == self.cfg.grid:
            return rows
        mat = grid_interp_matrix(grid, self.cfg.grid).astype(rows.dtype)
        return gc.matmul(DiffArray(mat), rows)

    def patchify(self, image: np.ndarray, stem: str) -> DiffArray:
        """(B, S, S, C) pixels -> (B, N, D) patch embeddings in row-major order."""
        if stem == "rgb":
            linear, embed, channels, section = self.rgb_stem, self.e_cam, self.cfg.rgb_channels, 1
        elif stem == "mod":
            linear, embed, channels, section = self.mod_stem, self.e_mod, self.cfg.mod_channels, 2
        else:
            raise ValueError(f"Unknown stem={stem!r}; expected 'rgb' or 'mod'")
        image = np.asarray(image, dtype=self.cfg.np_dtype)
        grid = self._grid_of(image, channels)
        p = self.cfg.patch_size
        batch = image.shape[0]
        patches = (
            image.reshape(batch, grid, p, grid, p, channels)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(batch, grid * grid, p * p * channels)
        )
        with gc.scope(f"stem.{stem}"):
            return linear(DiffArray(patches)) + embed + self._pos_section(section, grid)

    def build_sequence(self, rgb_patches: DiffArray, mod_patches: DiffArray, mode: str) -> TokenSequence:
        if rgb_patches.shape != mod_patches.shape:
            raise ShapeError(
                f"build_sequence: rgb patches {rgb_patches.shape} != mod patches {mod_patches.shape}"
            )
        batch, n, dim = rgb_patches.shape
        grid = math.isqrt(n)
        if grid * grid != n:
            raise ShapeError(f"build_sequence: {n} patches do not form a square grid")
        cls = self.cls_token + gc.slice_(self.pos, 0)
        cls = gc.broadcast(gc.reshape(cls, (1, 1, dim)), (batch, 1, dim))
        fusion = self._resample(self.bank.tokens, grid) + self._pos_section(0, grid)
        fusion = gc.broadcast(gc.reshape(fusion, (1, n, dim)), (batch, n, dim))
        tokens = gc.concat([cls, fusion, rgb_patches, mod_patches], axis=1)
        return TokenSequence(tokens, token_roles(n), mode, n)

    # -- forward -----------------------------------------------------------

    def encode_batch(
        self,
        rgb: np.ndarray,
        mod: np.ndarray,
        mode: str | None = None,
        keep_attention: bool = False,
    ) -> EncoderOutput:
        mode = mode or self.cfg.routing_mode
        if mode not in ROUTING_MODES:
            raise ConfigError(f"Unknown routing mode={mode!r}. Valid: {ROUTING_MODES}")
        if mode == "rgb-only":
            mod = np.zeros_like(mod)
        elif mode == "mod-only":
            rgb = np.zeros_like(rgb)

        seq = self.build_sequence(self.patchify(rgb, "rgb"), self.patchify(mod, "mod"), mode)
        n = seq.grid
        x = seq.tokens
        token_counts: list[int] = []
        roles: list[list[TokenRole]] = []
        attention: list[np.ndarray] = []
        for k, block in enumerate(self.blocks):
            mask = make_mask(k, mode, n, self.cfg.depth)
            if mask.shape[0] != x.shape[1]:
                raise MaskError(f"Layer {k}: mask {mask.shape} does not match {x.shape[1]} tokens")
            token_counts.append(x.shape[1])
            roles.append(seq.roles)
            with gc.scope(f"layer{k}"):
                x, weights = block(x, mask.allowed)
            if keep_attention:
                attention.append(weights)
            if k == 0 and mode != "persistent":
                seq = prune(TokenSequence(x, seq.roles, mode, n))
                x = seq.tokens
        x = self.norm(x)
        return EncoderOutput(
            cls=gc.slice_(x, (slice(None), 0)),
            fusion=gc.slice_(x, (slice(None), slice(1, 1 + n))),
            token_counts=token_counts,
            attention=attention,
            roles=roles,
        )

    def encode(self, rgb: np.ndarray, mod: np.ndarray, mode: str | None = None) -> tuple[DiffArray, DiffArray]:
        """Single image pair -> (CLS (D,), fusion grid (N, D))."""
        out = self.encode_batch(rgb[None], mod[None], mode)
        return gc.slice_(out.cls, 0), gc.slice_(out.fusion, 0)

    def project(self, cls: DiffArray) -> DiffArray:
        with gc.scope("projector"):
            return self.projector(cls)
