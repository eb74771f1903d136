"""Reward-model abstraction and the weighted reward loss.

A reward model scores an image (optionally conditioned on a caption);
higher is better on the model's own scale. The loss contribution of each
model is the negated score, so minimizing the loss maximizes the reward.
Scores are kept on each model's native scale; the lambda weights absorb
scale differences.

Ships three adapters: a deterministic mean-pixel toy reward with an
analytic optimum (used throughout the tests), plus thin wrappers for
CLIP-IQA and ImageReward behind optional third-party packages.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError
from .imaging import validate_image

# Model ids bound to the two loss weights.
CLIPIQA_ID = "clipiqa"
IMAGE_REWARD_ID = "iw"


@dataclass(frozen=True)
class Caption:
    """Tags or prompt accompanying an LR image; may be empty."""

    text: str = ""

    def __bool__(self) -> bool:
        return bool(self.text)


@dataclass(frozen=True)
class RewardScore:
    """Score of one model on one image; ``value`` keeps the autograd graph."""

    value: torch.Tensor
    model_id: str

    def item(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class RewardWeights:
    lambda_clipiqa: float = 5e-5
    lambda_iw: float = 5e-6

    def __post_init__(self) -> None:
        if self.lambda_clipiqa < 0 or self.lambda_iw < 0:
            raise ConfigurationError("reward weights must be non-negative")


class RewardModel:
    """Base adapter: deterministic, differentiable scoring of images.

    ``score`` takes an (H, W, 3) image or a (B, H, W, 3) batch and returns a
    scalar tensor (batch scores are averaged). Adapters that need a caption
    set ``requires_caption``.
    """

    requires_caption = False

    def score(self, image: torch.Tensor, caption: Caption | None = None) -> torch.Tensor:
        raise NotImplementedError


class MeanPixelReward(RewardModel):
    """Toy reward: the mean pixel value. Optimum and gradient are analytic."""

    def __init__(self, requires_caption: bool = False):
        self.requires_caption = requires_caption

    def score(self, image: torch.Tensor, caption: Caption | None = None) -> torch.Tensor:
        return image.mean()


def _cache_dir() -> str:
    return os.environ.get("RFSR_CACHE", os.path.expanduser("~/.cache/rfsr"))


def _as_caption_list(caption, n: int) -> list[Caption]:
    if caption is None:
        return [Caption("")] * n
    if isinstance(caption, Caption):
        return [caption] * n
    return list(caption)


def _captions_present(caption) -> bool:
    if caption is None:
        return False
    if isinstance(caption, Caption):
        return bool(caption.text)
    return len(caption) > 0 and all(c.text for c in caption)


class ClipIqaReward(RewardModel):
    """CLIP-based perceptual quality scorer (expects the ``piq`` package).

    Inputs are resized to the model's native 224x224 with bilinear
    interpolation and normalized inside the adapter, so callers always pass
    [0, 1] images at their own resolution.
    """

    input_size = 224

    def __init__(self, weights_path: str | None = None):
        try:
            import piq
        except ImportError as exc:
            raise ConfigurationError(
                "reward adapter 'clipiqa' needs the optional 'piq' package"
            ) from exc
        if weights_path is not None:
            os.environ.setdefault("TORCH_HOME", _cache_dir())
        self._scorer = piq.CLIPIQA(data_range=1.0)

    def score(self, image: torch.Tensor, caption: Caption | None = None) -> torch.Tensor:
        x = image if image.dim() == 4 else image.unsqueeze(0)
        x = x.permute(0, 3, 1, 2).float()
        x = torch.nn.functional.interpolate(
            x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False
        )
        return self._scorer(x).mean()


class ImageRewardModel(RewardModel):
    """Human-preference scorer for captioned images (``image-reward`` package).

    Uses the package's gradient-carrying scoring path so the score stays
    differentiable w.r.t. pixels; images are resized to 224x224 and
    normalized with the underlying CLIP statistics inside the adapter.
    """

    requires_caption = True
    input_size = 224
    _mean = (0.48145466, 0.4578275, 0.40821073)
    _std = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, weights_path: str | None = None):
        try:
            import ImageReward
        except ImportError as exc:
            raise ConfigurationError(
                "reward adapter 'imagereward' needs the optional 'image-reward' package"
            ) from exc
        self._model = ImageReward.load(weights_path or "ImageReward-v1.0", download_root=_cache_dir())
        self._model.eval()

    def score(self, image: torch.Tensor, caption: Caption | None = None) -> torch.Tensor:
        x = image if image.dim() == 4 else image.unsqueeze(0)
        x = x.permute(0, 3, 1, 2).float()
        x = torch.nn.functional.interpolate(
            x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False
        )
        mean = torch.tensor(self._mean, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self._std, device=x.device).view(1, 3, 1, 1)
        x = (x - mean) / std
        texts = [c.text for c in _as_caption_list(caption, x.shape[0])]
        tok = self._model.blip.tokenizer(
            texts, padding="max_length", truncation=True, max_length=35, return_tensors="pt"
        )
        rewards = self._model.score_gard(tok.input_ids, tok.attention_mask, x)
        return rewards.mean()


REWARD_KINDS = {
    "toy": lambda spec: MeanPixelReward(),
    "clipiqa": lambda spec: ClipIqaReward(weights_path=spec.get("weights_path")),
    "imagereward": lambda spec: ImageRewardModel(weights_path=spec.get("weights_path")),
}


def _probe_image(like: RewardModel) -> torch.Tensor:
    return torch.full((8, 8, 3), 0.5)


@dataclass
class RewardRegistry:
    """Registered reward models keyed by id; registration is the single writer."""

    _models: dict[str, RewardModel] = field(default_factory=dict)

    def register(self, model_id: str, adapter: RewardModel) -> RewardModel:
        """Register an adapter after a finite-score self-test on a probe image.

        A duplicate id replaces the previous adapter with a warning.
        """
        try:
            probe = adapter.score(_probe_image(adapter), Caption("probe"))
        except Exception as exc:
            raise ConfigurationError(f"reward adapter '{model_id}' failed its self-test: {exc}") from exc
        if not torch.isfinite(torch.as_tensor(float(probe))):
            raise ConfigurationError(f"reward adapter '{model_id}' returned a non-finite probe score")
        if model_id in self._models:
            warnings.warn(f"reward model '{model_id}' re-registered; replacing previous adapter")
        self._models[model_id] = adapter
        return adapter

    def get(self, model_id: str) -> RewardModel:
        if model_id not in self._models:
            raise ConfigurationError(f"no reward model registered under id '{model_id}'")
        return self._models[model_id]

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._models

    def ids(self) -> list[str]:
        return sorted(self._models)


def register_reward_model(registry: RewardRegistry, model_id: str, adapter: RewardModel) -> RewardModel:
    return registry.register(model_id, adapter)


def reward_score(model: RewardModel, image: torch.Tensor, caption: Caption | None = None) -> RewardScore:
    """Score an image with one reward model.

    Raises when the model requires a caption and none (or an empty one) is
    given, which is how caption-free pipelines surface the mismatch.
    """
    if model is None:
        raise ConfigurationError("reward model is not loaded")
    validate_image(image)
    if model.requires_caption and not _captions_present(caption):
        raise ConfigurationError(
            f"reward model '{getattr(model, 'model_id', type(model).__name__)}' requires a caption"
        )
    value = model.score(image, caption)
    return RewardScore(value=value, model_id=getattr(model, "model_id", type(model).__name__))


def reward_loss_components(
    image: torch.Tensor,
    caption: Caption | None,
    weights: RewardWeights,
    registry: RewardRegistry,
) -> dict[str, torch.Tensor]:
    """Per-model weighted loss terms; each term is lambda * (-score)."""
    zero = image.sum() * 0.0  # differentiable zero tied to the image graph
    comps: dict[str, torch.Tensor] = {CLIPIQA_ID: zero, IMAGE_REWARD_ID: zero.clone()}
    for model_id, lam in ((CLIPIQA_ID, weights.lambda_clipiqa), (IMAGE_REWARD_ID, weights.lambda_iw)):
        if lam == 0:
            continue
        if model_id not in registry:
            raise ConfigurationError(
                f"weight for reward model '{model_id}' is nonzero but no adapter is registered"
            )
        score = reward_score(registry.get(model_id), image, caption)
        comps[model_id] = lam * (-score.value)
    return comps


def reward_loss(
    image: torch.Tensor,
    caption: Caption | None,
    weights: RewardWeights,
    registry: RewardRegistry,
) -> torch.Tensor:
    """Combined reward loss: sum of lambda * (-score) over the weighted models.

    Returns exact zero when both weights are zero, independent of the
    registry contents and the caption.
    """
    comps = reward_loss_components(image, caption, weights, registry)
    return comps[CLIPIQA_ID] + comps[IMAGE_REWARD_ID]


def build_rewards(model_specs: list[dict] | None) -> RewardRegistry:
    """Build a registry from config entries [{id, kind, weights_path?}, ...]."""
    registry = RewardRegistry()
    for spec in model_specs or []:
        kind = spec.get("kind")
        if kind not in REWARD_KINDS:
            raise ConfigurationError(
                f"unknown reward model kind '{kind}'; expected one of {sorted(REWARD_KINDS)}"
            )
        adapter = REWARD_KINDS[kind](spec)
        adapter.model_id = spec.get("id", kind)
        registry.register(adapter.model_id, adapter)
    return registry
