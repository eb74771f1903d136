"""Training-pair synthesis and dataset iteration.

Low-resolution inputs are synthesized from ground-truth crops with a
configurable blur / resize / noise / JPEG stage chain, optionally applied
twice (second-order degradation), followed by a deterministic resize to the
target scale. Every random choice derives from an explicit seed, so pair
synthesis is reproducible and embarrassingly parallel.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DimensionError
from .reward import Caption

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


# ---------------------------------------------------------------------------
# Resampling


def _cubic_kernel(x: np.ndarray, a: float = -0.75) -> np.ndarray:
    # Keys cubic kernel; a = -0.75 matches the common GPU resampler.
    ax = np.abs(x)
    out = np.zeros_like(ax)
    inner = ax <= 1
    outer = (ax > 1) & (ax < 2)
    out[inner] = (a + 2) * ax[inner] ** 3 - (a + 3) * ax[inner] ** 2 + 1
    out[outer] = a * ax[outer] ** 3 - 5 * a * ax[outer] ** 2 + 8 * a * ax[outer] - 4 * a
    return out


def _resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """(n_out, n_in) row-stochastic weights for one axis, pixel centers at
    (i + 0.5) * scale - 0.5, edges replicated."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    if mode == "area":
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n_in)):
                overlap = min(hi, j + 1) - max(lo, j)
                if overlap > 0:
                    w[i, j] = overlap / scale
        return w
    if mode == "bilinear":
        taps, radius = 2, 1.0
        kernel = lambda x: np.maximum(0.0, 1.0 - np.abs(x))
    elif mode == "bicubic":
        taps, radius = 4, 2.0
        kernel = _cubic_kernel
    else:
        raise ConfigurationError(f"unknown resize mode '{mode}'")
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        j0 = int(np.floor(center)) - taps // 2 + 1
        js = np.arange(j0, j0 + taps)
        weights = kernel(center - js)
        for j, wj in zip(np.clip(js, 0, n_in - 1), weights):
            w[i, j] += wj
    return w


def resize(img: np.ndarray, out_h: int, out_w: int, mode: str = "bicubic") -> np.ndarray:
    """Separable resize of an (H, W, C) array; no antialiasing prefilter."""
    if img.ndim != 3:
        raise DimensionError(f"resize expects (H, W, C), got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"invalid output size {out_h}x{out_w}")
    wh = _resample_matrix(img.shape[0], out_h, mode)
    ww = _resample_matrix(img.shape[1], out_w, mode)
    out = np.tensordot(wh, img, axes=(1, 0))
    return np.tensordot(ww, out, axes=(1, 1)).transpose(1, 0, 2)


def gaussian_blur(img: np.ndarray, sigma, kernel_size: int = 21, theta: float = 0.0) -> np.ndarray:
    """Isotropic or anisotropic Gaussian blur with reflect padding.

    ``sigma`` is a scalar or an (s1, s2) pair for the principal axes; theta
    rotates the anisotropic kernel.
    """
    size = min(int(kernel_size) | 1, 2 * min(img.shape[0], img.shape[1]) - 1)
    half = size // 2
    coords = np.arange(size) - half
    xx, yy = np.meshgrid(coords, coords)
    if np.isscalar(sigma):
        s1 = s2 = float(sigma)
    else:
        s1, s2 = float(sigma[0]), float(sigma[1])
    if s1 <= 0 and s2 <= 0:
        return img
    s1, s2 = max(s1, 1e-3), max(s2, 1e-3)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    v = -np.sin(theta) * xx + np.cos(theta) * yy
    kernel = np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
    kernel /= kernel.sum()
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = ndimage.convolve(img[:, :, ch], kernel, mode="reflect")
    return out


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode to baseline JPEG at the given quality and decode back."""
    arr = np.clip(img, 0.0, 1.0)
    pil = Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as back:
        return np.asarray(back.convert("RGB"), dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# Degradation configuration


def _check_range(name: str, rng: tuple[float, float]) -> tuple[float, float]:
    lo, hi = float(rng[0]), float(rng[1])
    if hi < lo:
        raise ConfigurationError(f"{name} range {rng} is empty")
    return (lo, hi)


@dataclass(frozen=True)
class BlurStage:
    sigma_range: tuple[float, float] = (0.2, 3.0)
    kernel_size: int = 21
    anisotropic_prob: float = 0.25
    prob: float = 1.0

    def __post_init__(self) -> None:
        _check_range("blur sigma", self.sigma_range)
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"blur kernel_size must be odd and >= 3, got {self.kernel_size}")


@dataclass(frozen=True)
class ResizeStage:
    scale_range: tuple[float, float] = (0.3, 1.5)
    modes: tuple[str, ...] = ("area", "bilinear", "bicubic")
    prob: float = 1.0

    def __post_init__(self) -> None:
        lo, hi = _check_range("resize scale", self.scale_range)
        if lo <= 0:
            raise ConfigurationError(f"resize scale must be positive, got {self.scale_range}")
        if not self.modes:
            raise ConfigurationError("resize modes must be nonempty")
        for mode in self.modes:
            if mode not in ("area", "bilinear", "bicubic"):
                raise ConfigurationError(f"unknown resize mode '{mode}'")


@dataclass(frozen=True)
class NoiseStage:
    gaussian_sigma_range: tuple[float, float] = (0.0, 0.08)
    poisson_scale_range: tuple[float, float] = (50.0, 300.0)
    gray_prob: float = 0.4
    poisson_prob: float = 0.5
    prob: float = 1.0

    def __post_init__(self) -> None:
        _check_range("gaussian sigma", self.gaussian_sigma_range)
        lo, _ = _check_range("poisson scale", self.poisson_scale_range)
        if lo <= 0:
            raise ConfigurationError("poisson scale must be positive")


@dataclass(frozen=True)
class JpegStage:
    quality_range: tuple[int, int] = (30, 95)
    prob: float = 1.0

    def __post_init__(self) -> None:
        lo, hi = _check_range("jpeg quality", self.quality_range)
        if lo < 1 or hi > 100:
            raise ConfigurationError(f"jpeg quality range {self.quality_range} outside [1, 100]")


Stage = BlurStage | ResizeStage | NoiseStage | JpegStage


@dataclass(frozen=True)
class DegradationConfig:
    """Ordered stage chain; applied twice when ``second_order`` is set, then
    resized to 1/scale of the source with ``final_mode``."""

    stages: tuple[Stage, ...] = ()
    second_order: bool = True
    scale: int = 4
    final_mode: str = "bicubic"

    def __post_init__(self) -> None:
        if self.scale < 1:
            raise ConfigurationError(f"scale must be >= 1, got {self.scale}")
        if self.final_mode not in ("area", "bilinear", "bicubic"):
            raise ConfigurationError(f"unknown final resize mode '{self.final_mode}'")


def default_degradation(scale: int = 4) -> DegradationConfig:
    return DegradationConfig(
        stages=(BlurStage(), ResizeStage(), NoiseStage(), JpegStage()),
        second_order=True,
        scale=scale,
    )


def _apply_stage(x: np.ndarray, stage: Stage, rng: np.random.Generator) -> np.ndarray:
    if isinstance(stage, BlurStage):
        if rng.random() < stage.anisotropic_prob:
            s1 = rng.uniform(*stage.sigma_range)
            s2 = rng.uniform(*stage.sigma_range)
            theta = rng.uniform(0.0, np.pi)
            return gaussian_blur(x, (s1, s2), stage.kernel_size, theta)
        return gaussian_blur(x, rng.uniform(*stage.sigma_range), stage.kernel_size)
    if isinstance(stage, ResizeStage):
        factor = rng.uniform(*stage.scale_range)
        mode = stage.modes[int(rng.integers(len(stage.modes)))]
        out_h = max(1, int(round(x.shape[0] * factor)))
        out_w = max(1, int(round(x.shape[1] * factor)))
        return resize(x, out_h, out_w, mode)
    if isinstance(stage, NoiseStage):
        if rng.random() < stage.poisson_prob:
            lam = rng.uniform(*stage.poisson_scale_range)
            return rng.poisson(np.clip(x, 0.0, 1.0) * lam).astype(np.float64) / lam
        sigma = rng.uniform(*stage.gaussian_sigma_range)
        if rng.random() < stage.gray_prob:
            noise = rng.normal(0.0, sigma, size=x.shape[:2])[:, :, None]
        else:
            noise = rng.normal(0.0, sigma, size=x.shape)
        return x + noise
    if isinstance(stage, JpegStage):
        quality = int(rng.integers(stage.quality_range[0], stage.quality_range[1] + 1))
        return jpeg_roundtrip(x, quality)
    raise ConfigurationError(f"unknown stage {stage!r}")


def degrade(gt: torch.Tensor, cfg: DegradationConfig, seed: int) -> torch.Tensor:
    """Synthesize the LR counterpart of a ground-truth image.

    Deterministic given (gt, cfg, seed); output is float32 in [0, 1] at
    ceil(H/scale) x ceil(W/scale).
    """
    if gt.dim() != 3 or gt.shape[-1] != 3:
        raise DimensionError(f"degrade expects (H, W, 3), got {tuple(gt.shape)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF]))
    x = gt.detach().cpu().double().numpy()
    h0, w0 = x.shape[0], x.shape[1]
    passes = 2 if cfg.second_order else 1
    for _ in range(passes):
        for stage in cfg.stages:
            if rng.random() < stage.prob:
                x = np.clip(_apply_stage(x, stage, rng), 0.0, 1.0)
    target_h = -(-h0 // cfg.scale)
    target_w = -(-w0 // cfg.scale)
    x = np.clip(resize(x, target_h, target_w, cfg.final_mode), 0.0, 1.0)
    return torch.from_numpy(x.astype(np.float32))


# ---------------------------------------------------------------------------
# Caption providers


class CaptionProvider:
    """Deterministic map from an LR image to its caption."""

    def caption(self, lr: torch.Tensor) -> Caption:
        raise NotImplementedError


class ConstantCaptionProvider(CaptionProvider):
    def __init__(self, text: str):
        self.text = text

    def caption(self, lr: torch.Tensor) -> Caption:
        return Caption(self.text)


class NoneCaptionProvider(CaptionProvider):
    """Empty captions, for caption-free pipelines."""

    def caption(self, lr: torch.Tensor) -> Caption:
        return Caption("")


class DapeCaptionProvider(CaptionProvider):
    """Tag extractor adapter; needs the upstream tagger package and weights."""

    def __init__(self, weights_path: str | None = None):
        raise ConfigurationError(
            "caption provider 'dape' wraps an external tagger; install its package and "
            "provide weights to use it"
        )


def build_caption_provider(spec: dict | str | None) -> CaptionProvider:
    if spec is None:
        return NoneCaptionProvider()
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == "constant":
        return ConstantCaptionProvider(spec.get("text", "photo"))
    if kind == "none":
        return NoneCaptionProvider()
    if kind == "dape":
        return DapeCaptionProvider(spec.get("weights_path"))
    raise ConfigurationError(f"unknown caption provider '{kind}'")


def caption_of(provider: CaptionProvider, lr: torch.Tensor) -> Caption:
    if provider is None:
        raise ConfigurationError("caption provider is not loaded")
    return provider.caption(lr)


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class TrainPair:
    lr: torch.Tensor
    gt: torch.Tensor
    caption: Caption
    source_id: str
    seed: int


def _reflect_pad_to(img: torch.Tensor, min_h: int, min_w: int) -> torch.Tensor:
    h, w = img.shape[0], img.shape[1]
    if h >= min_h and w >= min_w:
        return img
    arr = img.numpy()
    # np.pad reflect caps at size-1 per application; repeat until large enough.
    while arr.shape[0] < min_h or arr.shape[1] < min_w:
        pad_h = min(min_h - arr.shape[0], arr.shape[0] - 1) if arr.shape[0] < min_h else 0
        pad_w = min(min_w - arr.shape[1], arr.shape[1] - 1) if arr.shape[1] < min_w else 0
        pad_h, pad_w = max(pad_h, 0), max(pad_w, 0)
        if pad_h == 0 and pad_w == 0:
            break
        arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    return torch.from_numpy(arr)


class PairDataset:
    """Deterministic stream of TrainPairs from in-memory source images.

    ``pair_at(i)`` is a pure function of (sources, config, seed, i): the
    source order reshuffles per epoch, the crop window and degradation draw
    from a per-index seed sequence. This makes batches indexable by
    iteration, which is what allows exact training resume.
    """

    def __init__(
        self,
        sources: list[tuple[str, torch.Tensor]],
        degradation: DegradationConfig,
        crop: int,
        seed: int,
        caption_provider: CaptionProvider | None = None,
    ):
        if not sources:
            raise ConfigurationError("dataset has no usable source images")
        if crop % 2 != 0:
            raise ConfigurationError(f"crop size must be even, got {crop}")
        self.sources = sources
        self.degradation = degradation
        self.crop = crop
        self.seed = seed
        self.caption_provider = caption_provider or NoneCaptionProvider()

    def __len__(self) -> int:
        return len(self.sources)

    def pair_at(self, index: int) -> TrainPair:
        n = len(self.sources)
        epoch, offset = divmod(index, n)
        order = np.random.default_rng(
            np.random.SeedSequence([self.seed & 0xFFFFFFFF, 0xE90C, epoch])
        ).permutation(n)
        source_id, img = self.sources[int(order[offset])]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFF, 0xC409, index]))
        img = _reflect_pad_to(img, self.crop, self.crop)
        top = int(rng.integers(0, img.shape[0] - self.crop + 1))
        left = int(rng.integers(0, img.shape[1] - self.crop + 1))
        gt = img[top : top + self.crop, left : left + self.crop].clone()
        pair_seed = int(rng.integers(0, 2**31 - 1))
        lr = degrade(gt, self.degradation, pair_seed)
        return TrainPair(
            lr=lr,
            gt=gt,
            caption=caption_of(self.caption_provider, lr),
            source_id=source_id,
            seed=pair_seed,
        )

    def batch(self, iteration: int, size: int) -> list[TrainPair]:
        return [self.pair_at(iteration * size + k) for k in range(size)]

    def __iter__(self):
        index = 0
        while True:
            yield self.pair_at(index)
            index += 1


def list_image_files(roots: list[str | Path]) -> list[Path]:
    files: list[Path] = []
    for root in roots:
        root = Path(root)
        if not root.exists():
            raise ConfigurationError(f"dataset root does not exist: {root}")
        files.extend(p for p in sorted(root.rglob("*")) if p.suffix.lower() in IMAGE_EXTENSIONS)
    return files


def make_dataset(
    roots: list[str | Path],
    degradation: DegradationConfig,
    crop: int,
    seed: int,
    caption_provider: CaptionProvider | None = None,
) -> PairDataset:
    """Dataset over image files found under ``roots``; unreadable files are
    skipped with a warning."""
    from .imaging import read_image

    if not roots:
        raise ConfigurationError("dataset roots are empty")
    sources = []
    for path in list_image_files(roots):
        try:
            sources.append((path.stem, read_image(path)))
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {path}: {exc}")
    return PairDataset(sources, degradation, crop, seed, caption_provider)


def make_synthetic_dataset(
    count: int,
    size: int,
    seed: int,
    degradation: DegradationConfig,
    crop: int | None = None,
    caption_provider: CaptionProvider | None = None,
) -> PairDataset:
    """Self-contained dataset of smooth procedural images, used by the toy
    preset so desk-scale runs need no external data."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5717]))
    sources = []
    for i in range(count):
        field_ = rng.normal(size=(size, size, 3))
        smooth = np.stack(
            [ndimage.gaussian_filter(field_[:, :, c], sigma=size / 8, mode="reflect") for c in range(3)],
            axis=2,
        )
        lo, hi = smooth.min(), smooth.max()
        img = 0.1 + 0.8 * (smooth - lo) / max(hi - lo, 1e-9)
        sources.append((f"synthetic_{i:03d}", torch.from_numpy(img.astype(np.float32))))
    return PairDataset(sources, degradation, crop or size, seed, caption_provider)
