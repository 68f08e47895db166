"""Engine-independent data types passed between modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import MaskError

if TYPE_CHECKING:
    from .gradcore import DiffArray


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int = 0
    location: str | None = None  # first non-finite entry, if any


# ---------------------------------------------------------------------------
# Tokens and masks
# ---------------------------------------------------------------------------

ROLE_CLS = "CLS"
ROLE_FUSION = "FUSION"
ROLE_CAM = "CAM"
ROLE_MOD = "MOD"


@dataclass(frozen=True)
class TokenRole:
    kind: str
    index: int = 0  # 1-based spatial index; 0 for CLS

    def __str__(self) -> str:
        return self.kind if self.kind == ROLE_CLS else f"{self.kind}({self.index})"


@dataclass
class TokenSequence:
    """Token block of shape (..., n_tokens, D) with one role per token."""

    tokens: DiffArray
    roles: list[TokenRole]
    mode: str
    grid: int  # patch count N per modality
    pruned: bool = False

    @property
    def n_tokens(self) -> int:
        return len(self.roles)


@dataclass
class AttentionMask:
    """Query x key admissibility for one layer; True means attend allowed."""

    layer: int
    mode: str
    allowed: np.ndarray

    def __post_init__(self) -> None:
        if self.allowed.ndim != 2 or self.allowed.shape[0] != self.allowed.shape[1]:
            raise MaskError(f"Mask must be square, got shape {self.allowed.shape}")
        empty = np.flatnonzero(~self.allowed.any(axis=1))
        if empty.size:
            raise MaskError(f"Mask rows {empty.tolist()} allow no key")

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Views and embeddings
# ---------------------------------------------------------------------------

@dataclass
class ViewBatch:
    """Projected embeddings per view, each of shape (B, d)."""

    globals: list[DiffArray]
    locals: list[DiffArray] = field(default_factory=list)

    @property
    def n_global(self) -> int:
        return len(self.globals)

    @property
    def n_local(self) -> int:
        return len(self.locals)

    def all_views(self) -> list[DiffArray]:
        return [*self.globals, *self.locals]


@dataclass(frozen=True)
class CropRect:
    top: int
    left: int
    height: int
    width: int

    def mirrored(self, image_width: int) -> CropRect:
        return CropRect(self.top, image_width - self.left - self.width, self.height, self.width)


@dataclass
class PairedView:
    rgb: np.ndarray  # (S, S, 3)
    mod: np.ndarray  # (S, S, 1)
    rect: CropRect
    flip: bool
    kind: str  # "global" | "local"


@dataclass
class ViewSet:
    globals: list[PairedView]
    locals: list[PairedView] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

CLASS_BACKGROUND = 0
CLASS_GROUND = 1
CLASS_BOX = 2
CLASS_DISK = 3
NUM_CLASSES = 4


@dataclass
class SceneObject:
    cls: int
    center: tuple[float, float]  # (row, col) in pixels
    extent: tuple[float, float]  # (height, width) in pixels
    depth: float  # meters
    color: tuple[float, float, float]


@dataclass
class SceneSample:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth_dense: np.ndarray  # (H, W) meters
    depth_sparse: np.ndarray  # (H, W) normalized, 0 = no return
    seg: np.ndarray  # (H, W) class ids
    instance: np.ndarray  # (H, W) index into objects, -1 where none
    objects: list[SceneObject]
    seed: int
    thermal: np.ndarray | None = None  # (H, W) in [0, 1]

    @property
    def size(self) -> int:
        return self.rgb.shape[0]


@dataclass
class PointSet:
    rows: np.ndarray
    cols: np.ndarray
    depths: np.ndarray  # meters

    def __len__(self) -> int:
        return int(self.depths.size)


# ---------------------------------------------------------------------------
# Evaluation and accounting
# ---------------------------------------------------------------------------

@dataclass
class ProbeMetrics:
    seg_miou: float | None = None
    depth_mae: float | None = None  # meters


@dataclass
class LayerCost:
    layer: int
    tokens: int
    attn_madds: int  # as computed
    minimal_attn_madds: int  # CLS + fusion queries only where the rest is dead
    analytic_madds: int


@dataclass
class CostReport:
    mode: str
    layers: list[LayerCost]
    total_madds: int
    sigreg_madds: int
    params: int
    peak_bytes: int
    steps: int = 0
    encoder_passes: int = 0

    @property
    def attn_madds(self) -> int:
        return sum(layer.attn_madds for layer in self.layers)


@dataclass
class StepMetrics:
    step: int
    loss_total: float
    loss_sigreg: float
    loss_inv: float
    lr: float
    wall_ms: float
