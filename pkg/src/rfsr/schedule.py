"""Timestep bookkeeping: the sampling-step to diffusion-timestep map, the
phase partition of the sampling trajectory, and the piecewise loss dispatch.

A trajectory of ``st_latest`` sampling steps is split into three phases:
EARLY steps (st <= st1) supervise the low-frequency structure against the
ground truth, REWARD steps (st > st2) apply reward feedback plus the style
regularizer, and the IDLE middle produces no loss and is never sampled for
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .errors import ConfigurationError
from .imaging import low_freq_loss
from .reward import CLIPIQA_ID, IMAGE_REWARD_ID, Caption, RewardRegistry, RewardWeights, reward_loss_components
from .style import FeatureExtractor, gram_kl_loss


class Phase(Enum):
    EARLY = "early"
    IDLE = "idle"
    REWARD = "reward"


@dataclass(frozen=True)
class TimestepSchedule:
    """Sampling-step bookkeeping for a ``T``-timestep diffusion process.

    ``st1`` is the last EARLY step and ``st2`` the last IDLE step, so the
    REWARD interval is [st2 + 1, st_latest].
    """

    T: int = 1000
    st_latest: int = 50
    st1: int = 20
    st2: int = 40

    def __post_init__(self) -> None:
        if not (1 <= self.st1 < self.st2 <= self.st_latest):
            raise ConfigurationError(
                f"need 1 <= st1 < st2 <= st_latest, got st1={self.st1}, st2={self.st2}, "
                f"st_latest={self.st_latest}"
            )
        if self.T < self.st_latest:
            raise ConfigurationError(f"T={self.T} must be >= st_latest={self.st_latest}")

    def check_step(self, st: int) -> None:
        if not (1 <= st <= self.st_latest):
            raise ValueError(f"sampling step {st} out of range [1, {self.st_latest}]")


SCHEDULE_PRESETS = {
    "seesr": TimestepSchedule(T=1000, st_latest=50, st1=20, st2=40),
    "diffbir": TimestepSchedule(T=1000, st_latest=50, st1=20, st2=40),
    "pasd": TimestepSchedule(T=1000, st_latest=20, st1=8, st2=17),
    "toy": TimestepSchedule(T=1000, st_latest=10, st1=4, st2=8),
}


def timestep_of(schedule: TimestepSchedule, st: int) -> int:
    """Diffusion timestep consumed by sampling step ``st``.

    Linear leading-edge spacing: t = round(T * (1 - (st-1)/st_latest)),
    so t(1) = T and the final step consumes t = T/st_latest before
    reaching 0.
    """
    schedule.check_step(st)
    return int(round(schedule.T * (1 - (st - 1) / schedule.st_latest)))


def phase_of(schedule: TimestepSchedule, st: int) -> Phase:
    schedule.check_step(st)
    if st <= schedule.st1:
        return Phase.EARLY
    if st > schedule.st2:
        return Phase.REWARD
    return Phase.IDLE


@dataclass(frozen=True)
class LossWeights:
    lambda_dwt: float = 5e-4
    lambda_r: float = 5e-6
    reward_weights: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self) -> None:
        if self.lambda_dwt < 0 or self.lambda_r < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class LossContext:
    """Inputs available to the per-phase losses.

    EARLY needs ``gt`` and ``gen_train``; REWARD needs ``gen_train`` plus
    ``gen_ref`` when the style weight is nonzero and ``caption`` when the
    captioned reward weight is nonzero.
    """

    gen_train: torch.Tensor | None = None
    gt: torch.Tensor | None = None
    gen_ref: torch.Tensor | None = None
    caption: Caption | tuple[Caption, ...] | None = None


LOSS_COMPONENT_KEYS = ("dwt_ll", f"reward_{CLIPIQA_ID}", f"reward_{IMAGE_REWARD_ID}", "gram_kl")


def loss_components(
    phase: Phase,
    ctx: LossContext,
    weights: LossWeights,
    rewards: RewardRegistry | None = None,
    extractor: FeatureExtractor | None = None,
) -> dict[str, torch.Tensor]:
    """Weighted loss terms for one phase; terms outside the phase are exact zeros."""
    if ctx.gen_train is None and phase is not Phase.IDLE:
        raise ConfigurationError(f"{phase.value} loss needs ctx.gen_train")
    zero = torch.zeros(())
    comps = {key: zero for key in LOSS_COMPONENT_KEYS}
    if phase is Phase.IDLE:
        return comps
    comps = {key: ctx.gen_train.sum() * 0.0 for key in LOSS_COMPONENT_KEYS}
    if phase is Phase.EARLY:
        if ctx.gt is None:
            raise ConfigurationError("EARLY loss needs ctx.gt")
        comps["dwt_ll"] = weights.lambda_dwt * low_freq_loss(ctx.gt, ctx.gen_train)
        return comps
    # REWARD phase
    rw = weights.reward_weights
    if rw.lambda_clipiqa > 0 or rw.lambda_iw > 0:
        if rewards is None:
            raise ConfigurationError("REWARD loss needs a reward registry")
        reward_comps = reward_loss_components(ctx.gen_train, ctx.caption, rw, rewards)
        comps[f"reward_{CLIPIQA_ID}"] = reward_comps[CLIPIQA_ID]
        comps[f"reward_{IMAGE_REWARD_ID}"] = reward_comps[IMAGE_REWARD_ID]
    if weights.lambda_r > 0:
        if ctx.gen_ref is None:
            raise ConfigurationError("REWARD loss needs ctx.gen_ref when lambda_r > 0")
        if extractor is None:
            raise ConfigurationError("REWARD loss needs a feature extractor when lambda_r > 0")
        comps["gram_kl"] = weights.lambda_r * gram_kl_loss(ctx.gen_train, ctx.gen_ref, extractor)
    return comps


def dispatch_loss(
    phase: Phase,
    ctx: LossContext,
    weights: LossWeights,
    rewards: RewardRegistry | None = None,
    extractor: FeatureExtractor | None = None,
) -> torch.Tensor:
    """Total loss for one phase. IDLE steps cost exactly zero and are skippable."""
    comps = loss_components(phase, ctx, weights, rewards, extractor)
    return sum(comps.values())


def sample_training_step(
    schedule: TimestepSchedule,
    rng: np.random.Generator,
    phase_mix: tuple[float, float] = (0.5, 0.5),
) -> int:
    """Draw a supervised sampling step: first pick EARLY vs REWARD by the mix
    ratio, then uniformly within the phase. IDLE steps are never drawn."""
    early_w, reward_w = phase_mix
    if early_w < 0 or reward_w < 0 or early_w + reward_w == 0:
        raise ConfigurationError(f"invalid phase mix {phase_mix}")
    if rng.random() < early_w / (early_w + reward_w):
        return int(rng.integers(1, schedule.st1 + 1))
    return int(rng.integers(schedule.st2 + 1, schedule.st_latest + 1))
