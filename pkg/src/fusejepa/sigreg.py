"""Invariance and SIGReg objectives: pure functions of projected embeddings.

SIGReg compares the empirical characteristic function of K random 1-D
projections with the standard normal one, e^{-t^2/2}, at T fixed knots.
Its cost is O(B*K*(T + d)).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ShapeError
from .gradcore import DiffArray
from .types import ViewBatch

if TYPE_CHECKING:
    from .config import RunConfig

DEFAULT_LAMBDA = 0.1
DEFAULT_KNOTS = 64
DEFAULT_T_MAX = 4.0


@dataclass
class SigRegConfig:
    lam: float
    num_directions: int
    knots: np.ndarray
    weights: np.ndarray
    dim: int
    direction_policy: str = "resample"  # "resample" | "fixed"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda={self.lam} outside [0, 1]")
        if self.num_directions < 1 or self.dim < 1:
            raise ConfigError(f"Need K >= 1 and d >= 1, got K={self.num_directions} d={self.dim}")
        if self.knots.shape != self.weights.shape or self.knots.ndim != 1:
            raise ConfigError("knots and weights must be 1-D arrays of equal length")
        if np.any(np.diff(self.knots) <= 0) or np.any(self.knots < 0):
            raise ConfigError("knots must be nonnegative and strictly increasing")
        if np.any(self.weights <= 0):
            raise ConfigError("quadrature weights must be positive")
        if self.direction_policy not in ("resample", "fixed"):
            raise ConfigError(f"Unknown direction_policy={self.direction_policy!r}")

    @property
    def num_knots(self) -> int:
        return int(self.knots.size)

    @classmethod
    def create(
        cls,
        lam: float = DEFAULT_LAMBDA,
        num_directions: int = 64,
        num_knots: int = DEFAULT_KNOTS,
        t_max: float = DEFAULT_T_MAX,
        dim: int = 16,
        direction_policy: str = "resample",
    ) -> SigRegConfig:
        knots, weights = make_knots(num_knots, t_max)
        return cls(lam, num_directions, knots, weights, dim, direction_policy)

    @classmethod
    def from_run(cls, run: RunConfig) -> SigRegConfig:
        return cls.create(
            lam=run.sigreg_lambda,
            num_directions=run.num_directions,
            num_knots=run.num_knots,
            t_max=run.t_max,
            dim=run.proj_dim,
            direction_policy=run.direction_policy,
        )


@dataclass
class LossTerms:
    total: DiffArray
    sigreg: DiffArray
    inv: DiffArray


# ---------------------------------------------------------------------------
# Knots and directions
# ---------------------------------------------------------------------------


def make_knots(num_knots: int, t_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform knots on (0, t_max] with trapezoid weights summing to t_max."""
    if num_knots < 2:
        raise ConfigError(f"Need at least 2 knots, got T={num_knots}")
    if t_max <= 0:
        raise ConfigError(f"t_max must be positive, got {t_max}")
    knots = t_max * np.arange(1, num_knots + 1, dtype=np.float64) / num_knots
    weights = np.ones(num_knots, dtype=np.float64)
    weights[0] = weights[-1] = 0.5
    weights *= t_max / weights.sum()
    return knots, weights


def sample_directions(num_directions: int, dim: int, seed: int | Sequence[int]) -> np.ndarray:
    """K isotropic unit vectors in R^d, deterministic in ``seed``."""
    if num_directions < 1 or dim < 1:
        raise ValueError(f"Need K >= 1 and d >= 1, got K={num_directions} d={dim}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_directions, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def directions_for_step(cfg: SigRegConfig, seed: int, step: int) -> np.ndarray:
    """Resampled every step from (seed, step) unless the policy is fixed."""
    if cfg.direction_policy == "fixed":
        return sample_directions(cfg.num_directions, cfg.dim, seed)
    return sample_directions(cfg.num_directions, cfg.dim, [seed, step])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def empirical_cf(z: DiffArray, dirs: np.ndarray, knots: np.ndarray) -> tuple[DiffArray, DiffArray]:
    """Cosine and sine parts, each (K, T), of the empirical CF of the projections ``z @ dirs.T``."""
    batch = z.shape[0]
    t = DiffArray(knots.astype(z.dtype).reshape(1, 1, -1))
    proj = gc.matmul(z, DiffArray(dirs.T.astype(z.dtype)))  # (B, K)
    arg = gc.reshape(proj, (batch, dirs.shape[0], 1)) * t  # (B, K, T)
    return gc.mean(gc.cos(arg), axis=0), gc.mean(gc.sin(arg), axis=0)


def sigreg_loss(z: DiffArray, dirs: np.ndarray, cfg: SigRegConfig) -> DiffArray:
    """(1/K) sum_k sum_j w_j [(c_kj - e^{-t_j^2/2})^2 + s_kj^2] for embeddings z of shape (B, d)."""
    if z.ndim != 2:
        raise ShapeError(f"sigreg_loss: embeddings must be (B, d), got {z.shape}")
    batch, dim = z.shape
    if batch < 2:
        raise ShapeError(f"sigreg_loss: need B >= 2 rows, got {batch}")
    if dirs.ndim != 2 or dirs.shape[1] != dim:
        raise ShapeError(f"sigreg_loss: directions {dirs.shape} do not match embedding dim {dim}")
    num_dirs = dirs.shape[0]
    dtype = z.dtype
    target = DiffArray(np.exp(-0.5 * cfg.knots**2).astype(dtype))
    weights = DiffArray(cfg.weights.astype(dtype))

    with gc.scope("sigreg"):
        c_hat, s_hat = empirical_cf(z, dirs, cfg.knots)
        err = gc.square(c_hat - target) + gc.square(s_hat)
        return gc.scalar_mul(gc.sum_(err * weights), 1.0 / num_dirs)


def _stack(views: Sequence[DiffArray]) -> DiffArray:
    return gc.concat([gc.reshape(v, (1, *v.shape)) for v in views], axis=0)


def invariance_loss(views: ViewBatch) -> DiffArray:
    """Mean squared distance of every view to the global-view center, batch-averaged."""
    if views.n_global < 1:
        raise ValueError("invariance_loss: need at least one global view for the center")
    dims = {v.shape for v in views.all_views()}
    if len(dims) != 1:
        raise ShapeError(f"invariance_loss: views disagree in shape: {sorted(dims)}")
    with gc.scope("inv"):
        center = gc.mean(_stack(views.globals), axis=0, keepdims=True)  # (1, B, d)
        diff = _stack(views.all_views()) - center
        per_view = gc.sum_(gc.square(diff), axis=2)  # (V, B)
        return gc.mean(per_view)


def stack_views(views: ViewBatch) -> DiffArray:
    """All projected views stacked along the batch axis: (V * B, d)."""
    return gc.concat(views.all_views(), axis=0)


def combined_terms(views: ViewBatch, dirs: np.ndarray, cfg: SigRegConfig) -> LossTerms:
    sig = sigreg_loss(stack_views(views), dirs, cfg)
    inv = invariance_loss(views)
    total = gc.scalar_mul(sig, cfg.lam) + gc.scalar_mul(inv, 1.0 - cfg.lam)
    return LossTerms(total, sig, inv)


def combined_loss(views: ViewBatch, dirs: np.ndarray, cfg: SigRegConfig) -> DiffArray:
    """lambda * SIGReg(all views) + (1 - lambda) * invariance."""
    return combined_terms(views, dirs, cfg).total


def three_pass_sigreg(
    z_joint: DiffArray,
    z_rgb: DiffArray,
    z_mod: DiffArray,
    dirs: np.ndarray,
    cfg: SigRegConfig,
) -> DiffArray:
    """Mean of SIGReg over the joint, RGB-only and companion-only embeddings (one direction set)."""
    if not (z_joint.shape == z_rgb.shape == z_mod.shape):
        raise ShapeError(
            f"three_pass_sigreg: shapes differ: {z_joint.shape}, {z_rgb.shape}, {z_mod.shape}"
        )
    joint, rgb, mod = (sigreg_loss(z, dirs, cfg) for z in (z_joint, z_rgb, z_mod))
    # anchored on the joint term: identical passes reproduce it bit for bit
    return joint + gc.scalar_mul((rgb - joint) + (mod - joint), 1.0 / 3.0)


def three_pass_terms(
    joint: ViewBatch,
    rgb_only: ViewBatch,
    mod_only: ViewBatch,
    dirs: np.ndarray,
    cfg: SigRegConfig,
) -> LossTerms:
    sig = three_pass_sigreg(stack_views(joint), stack_views(rgb_only), stack_views(mod_only), dirs, cfg)
    inv = invariance_loss(joint)
    total = gc.scalar_mul(sig, cfg.lam) + gc.scalar_mul(inv, 1.0 - cfg.lam)
    return LossTerms(total, sig, inv)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def collapsed_loss(cfg: SigRegConfig) -> float:
    """Closed form for all-zero embeddings: sum_j w_j (1 - e^{-t_j^2/2})^2."""
    return float(np.sum(cfg.weights * (1.0 - np.exp(-0.5 * cfg.knots**2)) ** 2))


def sampling_floor(
    batch: int,
    cfg: SigRegConfig,
    dirs: np.ndarray,
    draws: int = 50,
    seed: int = 0,
) -> float:
    """Mean SIGReg over ``draws`` fresh standard-normal batches."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with gc.no_grad():
        for _ in range(draws):
            z = DiffArray(rng.standard_normal((batch, cfg.dim)))
            total += sigreg_loss(z, dirs, cfg).item()
    return total / draws
