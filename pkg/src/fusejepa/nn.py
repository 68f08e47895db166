"""Parameter containers, initializers and the AdamW optimizer."""

from __future__ import annotations

import functools
import math
from collections.abc import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import gradcore as gc
from .errors import CheckpointError
from .gradcore import DiffArray


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to [-2*std, 2*std]."""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype)


def param(values: np.ndarray) -> DiffArray:
    return DiffArray(values, is_param=True)


class Module:
    """Owns parameters as attributes; names are qualified by attribute path."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffArray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, DiffArray) and value.is_param:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, DiffArray) and item.is_param:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_bytes(self) -> int:
        return sum(p.values.nbytes for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {state[name].shape} vs model {p.shape}"
                )
            p.values = np.array(state[name], dtype=p.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = param(trunc_normal(rng, (d_in, d_out), 0.02, dtype))
        self.bias = param(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: DiffArray) -> DiffArray:
        y = gc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.weight = param(np.ones(dim, dtype=dtype))
        self.bias = param(np.zeros(dim, dtype=dtype))

    def __call__(self, x: DiffArray) -> DiffArray:
        return gc.layer_norm(x, self.weight, self.bias)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype)

    def __call__(self, x: DiffArray) -> DiffArray:
        return self.fc2(gc.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay. 1-D parameters (biases, norms) are not decayed."""

    def __init__(
        self,
        params: list[DiffArray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.95),
        weight_decay: float = 0.05,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in params]
        self._v = [np.zeros_like(p.values) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim > 1:
                p.values -= (lr * self.weight_decay) * p.values
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.values -= (lr * update).astype(p.dtype, copy=False)


def cosine_lr(
    step: int,
    total_steps: int,
    peak: float,
    warmup_frac: float = 0.05,
    start_factor: float = 0.01,
    final: float = 1e-7,
) -> float:
    """Linear warmup from ``start_factor * peak`` then cosine decay to ``final``."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        frac = step / warmup
        return peak * (start_factor + (1.0 - start_factor) * frac)
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * progress))


def step_lr(epoch: int, base: float, step_size: int = 2, gamma: float = 0.5) -> float:
    return base * gamma ** (epoch // step_size)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) 1-D bilinear resampling weights, half-pixel centers."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"interp_matrix: sizes must be positive, got {n_out}, {n_in}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    mat.setflags(write=False)
    return mat


def grid_interp_matrix(g_out: int, g_in: int) -> np.ndarray:
    """Bilinear weights mapping a row-major g_in x g_in grid to g_out x g_out."""
    a = interp_matrix(g_out, g_in)
    return np.kron(a, a)
