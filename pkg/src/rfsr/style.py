"""Gram-matrix style statistics and the stylization regularizer.

The regularizer penalizes the squared Frobenius distance between the Gram
matrices of features extracted from the training model's output and from a
frozen reference model's output. Only the training image carries gradients;
anchoring to the frozen reference (rather than the ground truth) lets
quality exceed the ground truth while suppressing reward-hacking drift.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, DimensionError
from .imaging import validate_image


@dataclass
class FeatureStack:
    """Ordered per-layer feature maps, each (C, H, W) or (B, C, H, W)."""

    layers: list[torch.Tensor]
    extractor_id: str

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("feature stack must be nonempty")


@dataclass(frozen=True)
class GramMatrix:
    """Channel-by-channel feature statistic; symmetric PSD by construction."""

    g: torch.Tensor
    layer_index: int = 0


def gram(feature_map: torch.Tensor, layer_index: int = 0) -> GramMatrix:
    """G = F F^T / (C * H * W) for the (C, H*W) flattening of a feature map."""
    if feature_map.dim() != 3 or feature_map.numel() == 0:
        raise DimensionError(f"expected a nonempty (C, H, W) feature map, got {tuple(feature_map.shape)}")
    if not torch.isfinite(feature_map).all():
        raise DimensionError("feature map contains non-finite values")
    flat = feature_map.reshape(feature_map.shape[0], -1)
    return GramMatrix(g=flat @ flat.T / feature_map.numel(), layer_index=layer_index)


def _gram_nchw(features: torch.Tensor) -> torch.Tensor:
    # Batched gram: (B, C, H, W) -> (B, C, C), same normalization as gram().
    b, c = features.shape[0], features.shape[1]
    flat = features.reshape(b, c, -1)
    return flat @ flat.transpose(1, 2) / (c * flat.shape[2])


class FeatureExtractor:
    """Deterministic, differentiable map from images to a FeatureStack."""

    extractor_id = "base"

    def extract(self, image: torch.Tensor) -> FeatureStack:
        raise NotImplementedError


class TinyConvExtractor(FeatureExtractor):
    """Fixed-seed random-convolution extractor for tests and toy runs.

    Bias-free convolutions (a zero image yields all-zero features); the
    activation can be disabled to get a purely linear extractor.
    """

    def __init__(
        self,
        seed: int = 0,
        channels: tuple[int, ...] = (8, 8),
        kernel_size: int = 3,
        activation: str = "tanh",
        dtype: torch.dtype = torch.float32,
    ):
        if activation not in ("tanh", "linear"):
            raise ConfigurationError(f"unknown activation '{activation}'")
        self.activation = activation
        self.extractor_id = f"tiny(seed={seed},channels={channels},k={kernel_size},act={activation})"
        gen = torch.Generator().manual_seed(seed)
        self.weights: list[torch.Tensor] = []
        in_ch = 3
        for out_ch in channels:
            w = torch.randn(out_ch, in_ch, kernel_size, kernel_size, generator=gen, dtype=torch.float64)
            w = w / (in_ch * kernel_size * kernel_size) ** 0.5
            self.weights.append(w.to(dtype))
            in_ch = out_ch
        self.kernel_size = kernel_size

    def extract(self, image: torch.Tensor) -> FeatureStack:
        validate_image(image)
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        h = x.permute(0, 3, 1, 2)
        layers = []
        pad = self.kernel_size // 2
        for w in self.weights:
            h = nn.functional.conv2d(h, w.to(h.dtype), padding=pad)
            if self.activation == "tanh":
                h = torch.tanh(h)
            layers.append(h if batched else h.squeeze(0))
        return FeatureStack(layers=layers, extractor_id=self.extractor_id)


class VggFeatureExtractor(FeatureExtractor):
    """Pretrained-CNN extractor (torchvision VGG16) for production runs.

    Captures the configured feature layers (by default the last activation
    of each of the first four convolutional stages, the classic style
    statistic choice) with ImageNet normalization applied inside.
    """

    _mean = (0.485, 0.456, 0.406)
    _std = (0.229, 0.224, 0.225)
    default_layers = (3, 8, 15, 22)  # relu1_2, relu2_2, relu3_3, relu4_3

    def __init__(self, weights_path: str | None = None, layers: tuple[int, ...] | None = None):
        try:
            from torchvision.models import vgg16
        except ImportError as exc:
            raise ConfigurationError("style extractor 'vgg' needs the optional torchvision package") from exc
        if "RFSR_CACHE" in os.environ:
            os.environ.setdefault("TORCH_HOME", os.environ["RFSR_CACHE"])
        self.layers = tuple(layers) if layers else self.default_layers
        self.extractor_id = f"vgg16(layers={self.layers})"
        try:
            if weights_path:
                net = vgg16(weights=None)
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                from torchvision.models import VGG16_Weights

                net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ConfigurationError(f"failed to load VGG16 weights: {exc}") from exc
        self._features = net.features.eval()
        for p in self._features.parameters():
            p.requires_grad_(False)

    def extract(self, image: torch.Tensor) -> FeatureStack:
        validate_image(image)
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        h = x.permute(0, 3, 1, 2).float()
        mean = torch.tensor(self._mean, device=h.device).view(1, 3, 1, 1)
        std = torch.tensor(self._std, device=h.device).view(1, 3, 1, 1)
        h = (h - mean) / std
        layers = []
        for idx, module in enumerate(self._features):
            h = module(h)
            if idx in self.layers:
                layers.append(h if batched else h.squeeze(0))
            if idx >= max(self.layers):
                break
        return FeatureStack(layers=layers, extractor_id=self.extractor_id)


def extract_features(extractor: FeatureExtractor, image: torch.Tensor) -> FeatureStack:
    """Run an extractor on one image (or batch)."""
    if extractor is None:
        raise ConfigurationError("feature extractor is not loaded")
    return extractor.extract(image)


def gram_kl_loss(
    img_train: torch.Tensor, img_ref: torch.Tensor, extractor: FeatureExtractor
) -> torch.Tensor:
    """Squared Frobenius distance between per-layer Gram matrices, averaged
    over layers (and over the batch, if batched).

    Gradients flow only through ``img_train``; the reference path is
    detached.
    """
    if img_train.shape != img_ref.shape:
        raise DimensionError(
            f"shape mismatch: train {tuple(img_train.shape)} vs ref {tuple(img_ref.shape)}"
        )
    if extractor is None:
        raise ConfigurationError("feature extractor is not loaded")
    feats_train = extractor.extract(img_train)
    with torch.no_grad():
        feats_ref = extractor.extract(img_ref.detach())
    total = None
    for ft, fr in zip(feats_train.layers, feats_ref.layers):
        if ft.dim() == 3:
            ft, fr = ft.unsqueeze(0), fr.unsqueeze(0)
        diff = _gram_nchw(ft) - _gram_nchw(fr)
        term = (diff**2).sum(dim=(1, 2)).mean()
        total = term if total is None else total + term
    return total / len(feats_train.layers)


def build_extractor(spec: dict | None) -> FeatureExtractor:
    """Build the configured extractor: {kind: tiny|vgg, ...}."""
    spec = spec or {"kind": "tiny"}
    kind = spec.get("kind")
    if kind == "tiny":
        return TinyConvExtractor(
            seed=int(spec.get("seed", 0)),
            channels=tuple(spec.get("channels", (8, 8))),
            kernel_size=int(spec.get("kernel_size", 3)),
            activation=spec.get("activation", "tanh"),
        )
    if kind == "vgg":
        layers = spec.get("layers")
        return VggFeatureExtractor(
            weights_path=spec.get("weights_path"), layers=tuple(layers) if layers else None
        )
    raise ConfigurationError(f"unknown style extractor kind '{kind}'")
