"""Self-supervised training loop and the probe stage over a frozen checkpoint."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .checkpoint import restore, save_checkpoint
from .config import RunConfig, save_config
from .errors import CheckpointError, NonFiniteLossError
from .fusionvit import EncoderConfig, FusionViT
from .nn import AdamW, cosine_lr
from .probes import ProbeResult, extract_features, train_probes
from .sigreg import LossTerms, SigRegConfig, combined_terms, directions_for_step, three_pass_terms
from .synthscene import SceneDataset, scene_seed
from .types import SceneSample, StepMetrics, ViewBatch, ViewSet
from .viewpipe import CropSpec, collate, make_views_many

logger = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "loss_total", "loss_sigreg", "loss_inv", "lr", "wall_ms")
PROBE_TRAIN_OFFSET = 1_000
PROBE_VAL_OFFSET = 2_000


class Trainer:
    """Owns the encoder, the optimizer and the data stream of one run."""

    def __init__(self, run: RunConfig, dataset: SceneDataset | None = None):
        self.run = run
        self.model = FusionViT(EncoderConfig.from_run(run), seed=run.seed)
        self.sigreg = SigRegConfig.from_run(run)
        self.dataset = dataset or SceneDataset.from_run(run)
        self.global_spec, self.local_spec = CropSpec.pair_from_run(run)
        self.optimizer = AdamW(
            self.model.parameters(),
            lr=run.lr,
            betas=(run.beta1, run.beta2),
            weight_decay=run.weight_decay,
        )
        self.total_steps = run.total_steps()
        self.steps_per_epoch = len(self.dataset) // run.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(
                f"dataset_size={len(self.dataset)} is smaller than batch_size={run.batch_size}"
            )
        self.encoder_passes = 0

    # -- data --------------------------------------------------------------

    def samples_for_step(self, step: int) -> list[SceneSample]:
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = self.dataset.epoch_order(epoch)
        b = self.run.batch_size
        return self.dataset.get_many(order[pos * b : (pos + 1) * b])

    def views_for_step(self, step: int) -> list[ViewSet]:
        return make_views_many(
            self.samples_for_step(step),
            seed=scene_seed(self.run.seed, step),
            n_global=self.run.n_global,
            n_local=self.run.n_local,
            global_spec=self.global_spec,
            local_spec=self.local_spec,
            photometric_ops=self.run.photometric,
            companion=self.run.companion,
            num_workers=self.run.num_workers,
        )

    # -- objective ---------------------------------------------------------

    def embed(self, viewsets: list[ViewSet], mode: str) -> ViewBatch:
        """Projected CLS embeddings per view position, one batched encoder pass each."""
        batch = ViewBatch(globals=[], locals=[])
        for kind, rgb, mod in collate(viewsets):
            out = self.model.encode_batch(rgb, mod, mode)
            self.encoder_passes += 1
            z = self.model.project(out.cls)
            (batch.globals if kind == "global" else batch.locals).append(z)
        return batch

    def loss_terms(self, step: int, viewsets: list[ViewSet]) -> LossTerms:
        dirs = directions_for_step(self.sigreg, self.run.seed, step)
        joint = self.embed(viewsets, self.run.routing_mode)
        if self.run.objective == "joint-cls":
            return combined_terms(joint, dirs, self.sigreg)
        rgb_only = self.embed(viewsets, "rgb-only")
        mod_only = self.embed(viewsets, "mod-only")
        return three_pass_terms(joint, rgb_only, mod_only, dirs, self.sigreg)

    def train_step(self, step: int) -> StepMetrics:
        start = time.perf_counter()
        lr = cosine_lr(step, self.total_steps, self.run.lr, self.run.warmup_frac)
        viewsets = self.views_for_step(step)
        self.optimizer.zero_grad()
        terms = self.loss_terms(step, viewsets)
        value = terms.total.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, value)
        gc.backward(terms.total)
        self.optimizer.step(lr)
        wall_ms = (time.perf_counter() - start) * 1000.0 if self.run.log_wall_time else 0.0
        return StepMetrics(step, value, terms.sigreg.item(), terms.inv.item(), lr, wall_ms)

    def params_finite(self) -> bool:
        return all(np.all(np.isfinite(p.values)) for p in self.model.parameters())


# ---------------------------------------------------------------------------
# Run-level entry points
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    history: list[StepMetrics] = field(default_factory=list)
    checkpoint: Path | None = None


def _metrics_row(m: StepMetrics) -> dict:
    return {
        "step": m.step,
        "loss_total": repr(m.loss_total),
        "loss_sigreg": repr(m.loss_sigreg),
        "loss_inv": repr(m.loss_inv),
        "lr": repr(m.lr),
        "wall_ms": f"{m.wall_ms:.3f}",
    }


def train_run(run: RunConfig) -> TrainResult:
    """SSL training: ``metrics.csv``, periodic checkpoints and a final ``checkpoint/``."""
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(run, out_dir / "config.txt")
    trainer = Trainer(run)
    result = TrainResult(out_dir)
    logger.info(
        "Training %d steps: objective=%s mode=%s params=%d",
        trainer.total_steps, run.objective, run.routing_mode, trainer.model.num_parameters(),
    )
    # restorable even if parameters blow up before the first periodic checkpoint
    last_good = save_checkpoint(out_dir / "last_good", trainer.model, 0, run)

    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for step in range(trainer.total_steps):
            try:
                metrics = trainer.train_step(step)
            except NonFiniteLossError as e:
                if trainer.params_finite():
                    last_good = save_checkpoint(out_dir / "last_good", trainer.model, step, run)
                logger.error("Aborting: %s", e)
                raise NonFiniteLossError(e.step, e.value, str(last_good)) from e
            writer.writerow(_metrics_row(metrics))
            result.history.append(metrics)
            if (step + 1) % run.log_every == 0 or step == 0:
                logger.info(
                    "step=%d loss=%.5f sigreg=%.5f inv=%.5f lr=%.2e",
                    step, metrics.loss_total, metrics.loss_sigreg, metrics.loss_inv, metrics.lr,
                )
            if (step + 1) % run.checkpoint_every == 0:
                f.flush()
                last_good = save_checkpoint(out_dir / "checkpoints" / f"step_{step + 1:06d}", trainer.model, step + 1, run)

    result.checkpoint = save_checkpoint(out_dir / "checkpoint", trainer.model, trainer.total_steps, run)
    return result


def probe_run(run: RunConfig, checkpoint: Path | None = None) -> ProbeResult:
    """Train seg and depth probes on frozen features; ``checkpoint=None`` probes a fresh init."""
    model = FusionViT(EncoderConfig.from_run(run), seed=run.seed)
    if checkpoint is not None:
        try:
            restore(model, checkpoint)
        except CheckpointError as e:
            raise CheckpointError(f"Checkpoint {checkpoint} does not fit embed_dim={run.embed_dim}: {e}") from e
    before = model.state_dict()

    def features(offset: int, length: int):
        data = SceneDataset.from_run(run, seed_offset=offset, length=length)
        return extract_features(
            model, data.get_many(range(length)), run.companion, run.r_max, run.probe_batch_size,
        )

    train = features(PROBE_TRAIN_OFFSET, run.probe_train_size)
    val = features(PROBE_VAL_OFFSET, run.probe_val_size)
    out_dir = Path(run.out_dir)
    result = train_probes(model, train, val, run, out_dir / "probe_metrics.csv")

    after = model.state_dict()
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise RuntimeError("Encoder parameters changed during probe training")
    return result
