"""Fine-tuning loop: phase-gated losses on partial rollouts, Adam updates on
the trainable parameters, EMA shadow maintenance, and checkpointing.

All per-iteration randomness (sampling-step draw, initial latents, batch
composition) is derived functionally from (seed, iteration), so two runs
with the same config produce identical metric streams and a resumed run
continues exactly where the interrupted one left off.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PairDataset, TrainPair
from .diffusion import (
    Conditioning,
    EMAState,
    LatentDiffusionModel,
    ema_init,
    ema_update,
    frozen_copy,
    load_checkpoint,
    load_ema_into,
    reference_rollout,
    rollout_to,
    save_checkpoint,
    save_named_tensors,
)
from .errors import ConfigurationError
from .reward import RewardRegistry
from .schedule import (
    LossContext,
    LossWeights,
    Phase,
    TimestepSchedule,
    loss_components,
    phase_of,
    sample_training_step,
)
from .style import FeatureExtractor


@dataclass
class TrainConfig:
    learning_rate: float = 5e-6
    batch_size: int = 8
    iterations: int = 10_000
    gt_resolution: int = 512
    ema_decay: float = 0.999
    schedule: TimestepSchedule = field(default_factory=TimestepSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 1000
    grad_clip: float | None = None
    phase_mix: tuple[float, float] = (0.5, 0.5)
    output_dir: Path = Path("runs/default")
    config_hash: str = ""

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.iterations < 1:
            raise ConfigurationError("learning_rate, batch_size and iterations must be positive")
        if self.gt_resolution % 2 != 0:
            raise ConfigurationError(f"gt_resolution must be even, got {self.gt_resolution}")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")
        self.output_dir = Path(self.output_dir)


METRIC_COLUMNS = (
    "iteration",
    "phase",
    "st",
    "loss_total",
    "loss_dwt_ll",
    "loss_reward_clipiqa",
    "loss_reward_iw",
    "loss_gram_kl",
    "grad_norm",
    "wall_time",
    "skipped",
)


@dataclass
class TrainMetrics:
    iteration: int
    phase: str
    st: int
    loss_total: float
    loss_dwt_ll: float
    loss_reward_clipiqa: float
    loss_reward_iw: float
    loss_gram_kl: float
    grad_norm: float
    wall_time: float
    skipped: bool = False

    def row(self) -> list:
        return [getattr(self, name) for name in METRIC_COLUMNS]


@dataclass
class TrainerState:
    model: LatentDiffusionModel
    ref_model: LatentDiffusionModel
    ema: EMAState
    optimizer: torch.optim.Optimizer
    iteration: int = 0


def init_trainer(
    cfg: TrainConfig,
    model: LatentDiffusionModel,
    resume: Path | None = None,
) -> TrainerState:
    """Freeze a reference copy, build the optimizer and EMA shadow, and
    optionally restore everything from a checkpoint."""
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    state = TrainerState(
        model=model,
        ref_model=frozen_copy(model),
        ema=ema_init(model, cfg.ema_decay),
        optimizer=optimizer,
    )
    if resume is not None:
        ck = load_checkpoint(resume)
        model.load_state_dict(ck.load_params())
        state.ema = ck.load_ema() if ck.has_ema else ema_init(model, cfg.ema_decay)
        if (Path(resume) / "optimizer").exists():
            optimizer.load_state_dict(ck.load_optimizer())
        state.iteration = int(ck.meta.get("iteration", 0))
    model.train()
    return state


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([p & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _batch_latents(
    cfg: TrainConfig, model: LatentDiffusionModel, iteration: int, batch: list[TrainPair]
) -> torch.Tensor:
    h, w = batch[0].gt.shape[0], batch[0].gt.shape[1]
    shape = model.latent_shape(h, w)
    zs = []
    for idx in range(len(batch)):
        gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, 0xB0, iteration, idx))
        zs.append(torch.randn(shape, generator=gen))
    return torch.stack(zs)


def train_step(
    state: TrainerState,
    batch: list[TrainPair],
    cfg: TrainConfig,
    rewards: RewardRegistry | None = None,
    extractor: FeatureExtractor | None = None,
) -> tuple[TrainerState, TrainMetrics]:
    """One iteration: sample a supervised step, roll out with final-step-only
    gradients, apply the phase loss, and update parameters and EMA.

    A non-finite loss skips the update: the counter advances, the metrics
    row is flagged, and parameters stay untouched.
    """
    start = time.monotonic()
    iteration = state.iteration
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0xA0, iteration]))
    st = sample_training_step(cfg.schedule, rng, cfg.phase_mix)
    phase = phase_of(cfg.schedule, st)

    gt = torch.stack([p.gt for p in batch])
    lr = torch.stack([p.lr for p in batch])
    captions = tuple(p.caption for p in batch)
    cond = Conditioning(lr_image=lr, caption=captions)
    z = _batch_latents(cfg, state.model, iteration, batch)

    _, gen_train = rollout_to(state.model, z, st, cfg.schedule, cond, grad_final_only=True)
    gen_ref = None
    if phase is Phase.REWARD and cfg.weights.lambda_r > 0:
        gen_ref = reference_rollout(state.ref_model, z, st, cfg.schedule, cond)

    ctx = LossContext(gen_train=gen_train, gt=gt, gen_ref=gen_ref, caption=captions)
    comps = loss_components(phase, ctx, cfg.weights, rewards, extractor)
    loss = sum(comps.values())

    metrics = TrainMetrics(
        iteration=iteration,
        phase=phase.value,
        st=st,
        loss_total=float(loss.detach()),
        loss_dwt_ll=float(comps["dwt_ll"].detach()),
        loss_reward_clipiqa=float(comps["reward_clipiqa"].detach()),
        loss_reward_iw=float(comps["reward_iw"].detach()),
        loss_gram_kl=float(comps["gram_kl"].detach()),
        grad_norm=float("nan"),
        wall_time=0.0,
    )

    if not torch.isfinite(loss):
        metrics.skipped = True
        state.iteration += 1
        metrics.wall_time = time.monotonic() - start
        return state, metrics

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    sq = 0.0
    for p in state.model.trainable_parameters():
        if p.grad is not None:
            sq += float((p.grad.detach() ** 2).sum())
    metrics.grad_norm = sq**0.5
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.model.trainable_parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.ema = ema_update(state.ema, state.model)
    state.iteration += 1
    metrics.wall_time = time.monotonic() - start
    return state, metrics


def _checkpoint_meta(cfg: TrainConfig, state: TrainerState) -> dict:
    return {
        "iteration": state.iteration,
        "config_hash": cfg.config_hash,
        "schedule": {
            "T": cfg.schedule.T,
            "st_latest": cfg.schedule.st_latest,
            "st1": cfg.schedule.st1,
            "st2": cfg.schedule.st2,
        },
        "seed": cfg.seed,
    }


def train(
    cfg: TrainConfig,
    dataset: PairDataset,
    model: LatentDiffusionModel,
    rewards: RewardRegistry | None = None,
    extractor: FeatureExtractor | None = None,
    resume: Path | None = None,
) -> Path:
    """Run the configured number of iterations; returns the final checkpoint
    directory. Metrics are appended to ``metrics.csv``, one row per
    iteration; checkpoints land under ``checkpoints/`` every
    ``checkpoint_every`` iterations and at the end, always including EMA."""
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = cfg.output_dir / "metrics.csv"
    state = init_trainer(cfg, model, resume=resume)
    if state.iteration >= cfg.iterations:
        raise ConfigurationError(
            f"resume iteration {state.iteration} already >= configured iterations {cfg.iterations}"
        )
    write_header = resume is None or not metrics_path.exists()
    ckpt_dir = cfg.output_dir / "checkpoints"
    last_path: Path | None = None
    with open(metrics_path, "a" if not write_header else "w", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(METRIC_COLUMNS)
        for it in range(state.iteration, cfg.iterations):
            batch = dataset.batch(it, cfg.batch_size)
            state, metrics = train_step(state, batch, cfg, rewards, extractor)
            writer.writerow(metrics.row())
            fh.flush()
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                last_path = save_checkpoint(
                    ckpt_dir / f"iter_{state.iteration:06d}",
                    state.model,
                    state.ema,
                    state.optimizer,
                    _checkpoint_meta(cfg, state),
                )
    assert last_path is not None
    return last_path


def export_ema(checkpoint: Path, out: Path) -> Path:
    """Write the EMA shadow of a checkpoint as a standalone weights archive."""
    ck = load_checkpoint(checkpoint)
    ema = ck.load_ema()  # raises when the checkpoint has no EMA section
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_named_tensors(ema.shadow, out)
    return out


def load_eval_model(checkpoint: Path, use_ema: bool = True) -> LatentDiffusionModel:
    """Rebuild the checkpointed model, with EMA weights applied when present."""
    ck = load_checkpoint(checkpoint)
    model = ck.build_model()
    if use_ema and ck.has_ema:
        load_ema_into(model, ck.load_ema())
    model.eval()
    return model
