"""Latent-diffusion generator abstraction and the toy desk-scale model.

The generator signature is G(z_t, lr_image, t, control, caption): a noisy
latent plus conditioning goes in, a decoded image comes out after one or
more deterministic DDIM updates. Partial rollouts support final-step-only
gradients, the policy that keeps reward backpropagation stable. Also here:
the frozen reference rollout, EMA shadow parameters, and checkpoint I/O.
"""

from __future__ import annotations

import copy
import functools
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError
from .reward import Caption
from .schedule import TimestepSchedule, timestep_of

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass
class Conditioning:
    """Optional inputs consumed by a generator; adapters declare what they need."""

    lr_image: torch.Tensor | None = None
    control_signal: torch.Tensor | None = None
    caption: Caption | tuple[Caption, ...] | None = None


@functools.lru_cache(maxsize=8)
def _alpha_bar_f64(T: int) -> torch.Tensor:
    betas = torch.linspace(BETA_START, BETA_END, T, dtype=torch.float64)
    abar = torch.cumprod(1.0 - betas, dim=0)
    return torch.cat([torch.ones(1, dtype=torch.float64), abar])


def alpha_bar(T: int, t: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Cumulative signal fraction at timestep ``t`` of a linear beta schedule;
    alpha_bar(0) = 1."""
    if not (0 <= t <= T):
        raise ValueError(f"timestep {t} out of range [0, {T}]")
    return _alpha_bar_f64(T)[t].to(dtype)


class LatentDiffusionModel(nn.Module):
    """Base class for generator adapters.

    Subclasses provide ``predict_noise``, ``decode`` and ``latent_shape``,
    declare ``required_conditioning``, and keep ``build_config`` so
    checkpoints can rebuild them.
    """

    kind = "base"
    required_conditioning: tuple[str, ...] = ()
    build_config: dict = {}

    def predict_noise(self, z: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        raise NotImplementedError

    def trainable_parameters(self):
        return (p for p in self.parameters() if p.requires_grad)


def check_conditioning(model: LatentDiffusionModel, cond: Conditioning) -> None:
    for name in model.required_conditioning:
        if getattr(cond, name, None) is None:
            raise ConfigurationError(f"model '{model.kind}' requires conditioning field '{name}'")


def smooth_clamp01(x: torch.Tensor, margin: float = 0.02) -> torch.Tensor:
    """C1 squashing of the real line into (0, 1): identity on
    [margin, 1 - margin], exponential saturation outside."""
    m = margin
    low = m * torch.exp(torch.clamp((x - m) / m, max=0.0))
    high = 1.0 - m * torch.exp(torch.clamp(((1.0 - m) - x) / m, max=0.0))
    return torch.where(x < m, low, torch.where(x > 1.0 - m, high, x))


def smooth_clamp01_inverse(y: torch.Tensor, margin: float = 0.02) -> torch.Tensor:
    m = margin
    eps = torch.finfo(y.dtype).tiny
    low = m + m * torch.log(torch.clamp(y / m, min=eps))
    high = (1.0 - m) - m * torch.log(torch.clamp((1.0 - y) / m, min=eps))
    return torch.where(y < m, low, torch.where(y > 1.0 - m, high, y))


def denoise_step(
    model: LatentDiffusionModel,
    z: torch.Tensor,
    st: int,
    schedule: TimestepSchedule,
    cond: Conditioning,
) -> torch.Tensor:
    """One deterministic DDIM update from t(st) to t(st+1) (0 after the last step)."""
    schedule.check_step(st)
    check_conditioning(model, cond)
    t = timestep_of(schedule, st)
    t_next = timestep_of(schedule, st + 1) if st < schedule.st_latest else 0
    eps = model.predict_noise(z, t, cond)
    ab_t = alpha_bar(schedule.T, t, z.dtype)
    ab_next = alpha_bar(schedule.T, t_next, z.dtype)
    x0 = (z - torch.sqrt(1.0 - ab_t) * eps) / torch.sqrt(ab_t)
    return torch.sqrt(ab_next) * x0 + torch.sqrt(1.0 - ab_next) * eps


def rollout_to(
    model: LatentDiffusionModel,
    z_init: torch.Tensor,
    target_st: int,
    schedule: TimestepSchedule,
    cond: Conditioning,
    grad_final_only: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run sampling steps 1..target_st and decode the result.

    With ``grad_final_only`` (the default), every step before the target runs
    without gradient tracking and the latent is detached, so only the final
    update plus the decoder carry gradients; backpropagating the whole chain
    is available for experiments but risks exploding gradients.
    """
    schedule.check_step(target_st)
    z = z_init
    if grad_final_only:
        with torch.no_grad():
            for st in range(1, target_st):
                z = denoise_step(model, z, st, schedule, cond)
        z = z.detach()
        z = denoise_step(model, z, target_st, schedule, cond)
    else:
        for st in range(1, target_st + 1):
            z = denoise_step(model, z, st, schedule, cond)
    return z, model.decode(z)


def reference_rollout(
    frozen_model: LatentDiffusionModel,
    z_init: torch.Tensor,
    target_st: int,
    schedule: TimestepSchedule,
    cond: Conditioning,
) -> torch.Tensor:
    """Rollout of the frozen reference on the same noise and conditioning as
    the training rollout; carries no gradients anywhere."""
    with torch.no_grad():
        _, img = rollout_to(frozen_model, z_init, target_st, schedule, cond, grad_final_only=False)
    return img.detach()


@dataclass
class TrajectoryPoint:
    """State after sampling step ``st``, which consumed diffusion timestep ``t``."""

    st: int
    t: int
    latent: torch.Tensor
    image: torch.Tensor | None = None


def rollout_trajectory(
    model: LatentDiffusionModel,
    z_init: torch.Tensor,
    schedule: TimestepSchedule,
    cond: Conditioning,
    decode_each: bool = True,
) -> list[TrajectoryPoint]:
    """Full no-grad rollout keeping the latent (and optionally the decoded
    image) after every sampling step."""
    points: list[TrajectoryPoint] = []
    z = z_init
    with torch.no_grad():
        for st in range(1, schedule.st_latest + 1):
            z = denoise_step(model, z, st, schedule, cond)
            img = model.decode(z) if decode_each else None
            points.append(TrajectoryPoint(st=st, t=timestep_of(schedule, st), latent=z, image=img))
    return points


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EMAState:
    """Exponential-moving-average shadow of the trainable parameters."""

    shadow: dict[str, torch.Tensor]
    decay: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.decay < 1.0):
            raise ConfigurationError(f"EMA decay must be in [0, 1), got {self.decay}")


def _named_trainable(model: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def ema_init(model: nn.Module, decay: float) -> EMAState:
    return EMAState(
        shadow={name: p.detach().clone() for name, p in _named_trainable(model).items()},
        decay=decay,
    )


def ema_update(state: EMAState, params: nn.Module | dict[str, torch.Tensor]) -> EMAState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    current = _named_trainable(params) if isinstance(params, nn.Module) else params
    if set(current) != set(state.shadow):
        raise DimensionError("EMA shadow and parameter names do not match")
    new_shadow = {}
    for name, p in current.items():
        s = state.shadow[name]
        if s.shape != p.shape:
            raise DimensionError(f"EMA shape mismatch for '{name}': {tuple(s.shape)} vs {tuple(p.shape)}")
        new_shadow[name] = state.decay * s + (1.0 - state.decay) * p.detach()
    return EMAState(shadow=new_shadow, decay=state.decay)


def load_ema_into(model: nn.Module, state: EMAState) -> None:
    """Copy the shadow parameters into the model (for evaluation/export)."""
    with torch.no_grad():
        for name, p in _named_trainable(model).items():
            if name not in state.shadow:
                raise DimensionError(f"EMA shadow missing parameter '{name}'")
            p.copy_(state.shadow[name])


# ---------------------------------------------------------------------------
# Toy model


class ToyDenoiser(nn.Module):
    """Two-conv noise predictor with per-timestep embedding rows.

    The embedding gives each diffusion timestep its own parameters, which is
    what makes gradient-locality checks on partial rollouts meaningful.
    """

    def __init__(self, latent_channels: int, hidden_channels: int, T: int, condition_on_lr: bool):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, hidden_channels, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden_channels, latent_channels, 3, padding=1)
        self.t_embed = nn.Embedding(T + 1, hidden_channels)
        self.lr_proj = nn.Conv2d(3, hidden_channels, 1) if condition_on_lr else None

    def forward(self, z: torch.Tensor, t: int, lr_image: torch.Tensor | None) -> torch.Tensor:
        h = self.conv_in(z)
        if self.lr_proj is not None and lr_image is not None:
            lr = lr_image if lr_image.dim() == 4 else lr_image.unsqueeze(0)
            lr = lr.permute(0, 3, 1, 2).to(h.dtype)
            lr = F.interpolate(lr, size=h.shape[-2:], mode="nearest")
            h = h + self.lr_proj(lr)
        emb = self.t_embed(torch.tensor(t, device=z.device))
        h = torch.tanh(h + emb.view(1, -1, 1, 1))
        return self.conv_out(h)


class ToyLatentDiffusion(LatentDiffusionModel):
    """Self-contained desk-scale generator: tiny noise predictor plus an
    invertible affine "VAE" with spatial factor 2.

    decode pixel-shuffles the (12, H/2, W/2) latent to (H, W, 3), maps it
    affinely around mid-gray, and applies a smooth clamp that is exactly
    invertible, so encode(decode(z)) == z up to floating error.
    """

    kind = "toy"
    required_conditioning: tuple[str, ...] = ()
    vae_factor = 2

    def __init__(
        self,
        seed: int = 0,
        hidden_channels: int = 8,
        latent_channels: int = 12,
        T: int = 1000,
        condition_on_lr: bool = True,
        vae_scale: float = 0.125,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.denoiser = ToyDenoiser(latent_channels, hidden_channels, T, condition_on_lr)
        self.latent_channels = latent_channels
        self.T = T
        self.register_buffer("vae_scale", torch.tensor(float(vae_scale)))
        self._init_weights(seed)
        self.to(dtype)
        self.build_config = {
            "kind": "toy",
            "seed": seed,
            "hidden_channels": hidden_channels,
            "latent_channels": latent_channels,
            "T": T,
            "condition_on_lr": condition_on_lr,
            "vae_scale": vae_scale,
        }

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                    p.copy_(torch.randn(p.shape, generator=gen) / fan_in**0.5)

    def predict_noise(self, z: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        batched = z.dim() == 4
        x = z if batched else z.unsqueeze(0)
        eps = self.denoiser(x, t, cond.lr_image)
        return eps if batched else eps.squeeze(0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        batched = z.dim() == 4
        x = z if batched else z.unsqueeze(0)
        y = F.pixel_shuffle(x, self.vae_factor)
        img = smooth_clamp01(0.5 + self.vae_scale.to(y.dtype) * y)
        img = img.permute(0, 2, 3, 1)
        return img if batched else img.squeeze(0)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        y = (smooth_clamp01_inverse(x.permute(0, 3, 1, 2)) - 0.5) / self.vae_scale.to(x.dtype)
        z = F.pixel_unshuffle(y, self.vae_factor)
        return z if batched else z.squeeze(0)

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        if height % self.vae_factor or width % self.vae_factor:
            raise DimensionError(f"image size {height}x{width} not divisible by {self.vae_factor}")
        return (self.latent_channels, height // self.vae_factor, width // self.vae_factor)


def build_toy_model(seed: int = 0, **kwargs) -> ToyLatentDiffusion:
    """Deterministic toy generator; identical seeds give identical parameters."""
    return ToyLatentDiffusion(seed=seed, **kwargs)


class _ExternalAdapter(LatentDiffusionModel):
    """Placeholder for adapters that wrap external pretrained ISR pipelines.

    They define the conditioning contract here; actually loading one needs
    the upstream checkpoint and packages, which this repo does not ship.
    """

    def __init__(self, kind: str, required: tuple[str, ...]):
        super().__init__()
        self.kind = kind
        self.required_conditioning = required
        raise ConfigurationError(
            f"model kind '{kind}' wraps an external pretrained pipeline; install its package "
            f"and point model.weights_path at a checkpoint to use it"
        )


MODEL_KINDS = {
    "toy": lambda spec: build_toy_model(
        seed=int(spec.get("seed", 0)),
        hidden_channels=int(spec.get("hidden_channels", 8)),
        latent_channels=int(spec.get("latent_channels", 12)),
        T=int(spec.get("T", 1000)),
        condition_on_lr=bool(spec.get("condition_on_lr", True)),
    ),
    # Conditioning contracts of the supported external pipelines: SeeSR and
    # PASD consume the LR image and a caption; DiffBIR runs captionless on
    # its restoration-module control signal.
    "seesr": lambda spec: _ExternalAdapter("seesr", ("lr_image", "caption")),
    "diffbir": lambda spec: _ExternalAdapter("diffbir", ("control_signal",)),
    "pasd": lambda spec: _ExternalAdapter("pasd", ("lr_image", "caption")),
}


def build_model(spec: dict) -> LatentDiffusionModel:
    kind = spec.get("kind")
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind '{kind}'; expected one of {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind](spec)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_FILES = ("params", "ema", "optimizer", "meta")


def parameter_fingerprint(tensors: dict[str, torch.Tensor] | nn.Module) -> str:
    """Order-independent hash of named tensors, for frozen-weight checks."""
    if isinstance(tensors, nn.Module):
        tensors = dict(tensors.named_parameters())
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_named_tensors(tensors: dict[str, torch.Tensor], path: Path) -> None:
    """Byte-deterministic named-tensor archive (sorted keys)."""
    from safetensors.torch import save_file

    save_file({k: v.detach().cpu().contiguous() for k, v in sorted(tensors.items())}, str(path))


def load_named_tensors(path: Path) -> dict[str, torch.Tensor]:
    from safetensors.torch import load_file

    return load_file(str(path))


def save_checkpoint(
    directory: Path,
    model: LatentDiffusionModel,
    ema: EMAState | None,
    optimizer: torch.optim.Optimizer | None,
    meta: dict,
) -> Path:
    """Write a checkpoint directory: params / ema / optimizer / meta."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_named_tensors(dict(model.state_dict()), directory / "params")
    if ema is not None:
        save_named_tensors(ema.shadow, directory / "ema")
    if optimizer is not None:
        torch.save(optimizer.state_dict(), directory / "optimizer")
    meta = dict(meta)
    meta.setdefault("model", model.build_config)
    if ema is not None:
        meta["ema_decay"] = ema.decay
    (directory / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


@dataclass
class Checkpoint:
    directory: Path
    meta: dict

    @property
    def has_ema(self) -> bool:
        return (self.directory / "ema").exists()

    def load_params(self) -> dict[str, torch.Tensor]:
        return load_named_tensors(self.directory / "params")

    def load_ema(self) -> EMAState:
        if not self.has_ema:
            raise ConfigurationError(f"checkpoint {self.directory} has no EMA section")
        return EMAState(shadow=load_named_tensors(self.directory / "ema"),
                        decay=float(self.meta.get("ema_decay", 0.999)))

    def load_optimizer(self) -> dict:
        return torch.load(self.directory / "optimizer", weights_only=False)

    def build_model(self) -> LatentDiffusionModel:
        model = build_model(self.meta["model"])
        model.load_state_dict(self.load_params())
        return model


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "meta"
    if not meta_path.exists():
        raise ConfigurationError(f"no checkpoint at {directory} (missing meta)")
    return Checkpoint(directory=directory, meta=json.loads(meta_path.read_text()))


def frozen_copy(model: LatentDiffusionModel) -> LatentDiffusionModel:
    """Deep copy with gradients disabled, for the reference rollout."""
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad_(False)
    ref.eval()
    return ref
