"""Pixel-space primitives.

Images are torch tensors of shape (H, W, 3) (optionally with leading batch
dimensions) holding values in [0, 1]. This module provides PNG I/O, the
single-level orthonormal Haar wavelet transform and its inverse, the
low-frequency structure loss used during early denoising steps, and SSIM
(full image and per wavelet band).
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DimensionError

# Original SSIM defaults: 11-tap Gaussian window, sigma 1.5, stabilizers
# K1/K2 on a unit dynamic range.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def validate_image(img: torch.Tensor, name: str = "image") -> None:
    """Check the (…, H, W, 3) layout and finiteness of an image tensor."""
    if not isinstance(img, torch.Tensor):
        raise DimensionError(f"{name} must be a torch.Tensor, got {type(img).__name__}")
    if img.dim() < 3 or img.shape[-1] != 3:
        raise DimensionError(f"{name} must have shape (..., H, W, 3), got {tuple(img.shape)}")
    if not img.dtype.is_floating_point:
        raise DimensionError(f"{name} must be floating point, got {img.dtype}")
    if not torch.isfinite(img).all():
        raise DimensionError(f"{name} contains non-finite values")


def read_image(path: str | Path) -> torch.Tensor:
    """Load an 8-bit image file as a float32 (H, W, 3) tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def write_image(img: torch.Tensor, path: str | Path) -> None:
    """Write an (H, W, 3) tensor to an 8-bit PNG, rounding clamp(v, 0, 1) * 255."""
    validate_image(img)
    if img.dim() != 3:
        raise DimensionError(f"write_image expects a single (H, W, 3) image, got {tuple(img.shape)}")
    arr = img.detach().cpu().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).numpy()
    Image.fromarray(arr, mode="RGB").save(path)


def ensure_even(img: torch.Tensor) -> torch.Tensor:
    """Reflect-pad the bottom/right edge so H and W are even."""
    validate_image(img)
    h, w = img.shape[-3], img.shape[-2]
    pad_h, pad_w = h % 2, w % 2
    if pad_h == 0 and pad_w == 0:
        return img
    # F.pad counts dims from the last; layout here is (..., H, W, C).
    flat = img.reshape(-1, h, w, img.shape[-1]).permute(0, 3, 1, 2)
    padded = F.pad(flat, (0, pad_w, 0, pad_h), mode="reflect")
    out = padded.permute(0, 2, 3, 1)
    return out.reshape(*img.shape[:-3], h + pad_h, w + pad_w, img.shape[-1])


class SubbandDecomposition(NamedTuple):
    """Single-level wavelet subbands, each of shape (…, H/2, W/2, 3)."""

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


def dwt_forward(image: torch.Tensor) -> SubbandDecomposition:
    """Orthonormal single-level 2D Haar decomposition, per channel.

    For each 2x2 block (a, b / c, d):
        ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
        hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2

    The filters are orthonormal, so energy is preserved and the transform
    is exactly invertible. Differentiable.
    """
    validate_image(image)
    h, w = image.shape[-3], image.shape[-2]
    if h % 2 != 0 or w % 2 != 0:
        raise DimensionError(f"wavelet transform requires even H and W, got {h}x{w}; pad first")
    a = image[..., 0::2, 0::2, :]
    b = image[..., 0::2, 1::2, :]
    c = image[..., 1::2, 0::2, :]
    d = image[..., 1::2, 1::2, :]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return SubbandDecomposition(ll, lh, hl, hh)


def dwt_inverse(subbands: SubbandDecomposition) -> torch.Tensor:
    """Exact inverse of :func:`dwt_forward` (up to floating-point error)."""
    ll, lh, hl, hh = subbands
    for name, band in zip(("lh", "hl", "hh"), (lh, hl, hh)):
        if band.shape != ll.shape:
            raise DimensionError(f"subband {name} shape {tuple(band.shape)} != ll shape {tuple(ll.shape)}")
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    hh2, ww2 = ll.shape[-3], ll.shape[-2]
    top = torch.stack((a, b), dim=-2).reshape(*ll.shape[:-3], hh2, ww2 * 2, ll.shape[-1])
    bot = torch.stack((c, d), dim=-2).reshape(*ll.shape[:-3], hh2, ww2 * 2, ll.shape[-1])
    out = torch.stack((top, bot), dim=-3)
    return out.reshape(*ll.shape[:-3], hh2 * 2, ww2 * 2, ll.shape[-1])


def low_freq_loss(gt: torch.Tensor, gen: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between the LL subbands of two images.

    Resolution-independent (mean, not sum) and differentiable in ``gen``;
    ``|.|`` uses the usual subgradient value 0 at exact ties.
    """
    if gt.shape != gen.shape:
        raise DimensionError(f"shape mismatch: gt {tuple(gt.shape)} vs gen {tuple(gen.shape)}")
    ll_gt = dwt_forward(gt).ll
    ll_gen = dwt_forward(gen).ll
    return (ll_gt - ll_gen).abs().mean()


def _gaussian_kernel1d(size: int, sigma: float, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    offsets = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    k = torch.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _ssim_global(x: torch.Tensor, y: torch.Tensor, c1: float, c2: float) -> float:
    # Fallback for images smaller than the window: one window covering the
    # whole image, uniform weights, population statistics.
    mx = x.mean(dim=(-1, -2), keepdim=True)
    my = y.mean(dim=(-1, -2), keepdim=True)
    vx = ((x - mx) ** 2).mean(dim=(-1, -2))
    vy = ((y - my) ** 2).mean(dim=(-1, -2))
    cxy = ((x - mx) * (y - my)).mean(dim=(-1, -2))
    mx = mx.squeeze(-1).squeeze(-1)
    my = my.squeeze(-1).squeeze(-1)
    val = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(val.mean())


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """SSIM between two (H, W, 3) images on a unit dynamic range.

    Uses an 11x11 Gaussian window (sigma 1.5) in valid mode, averaged over
    channels and positions. Images smaller than the window fall back to a
    single global-statistics window.
    """
    validate_image(a, "a")
    validate_image(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 3:
        raise DimensionError(f"ssim expects a single (H, W, 3) image, got {tuple(a.shape)}")
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    # Channels become the batch dimension so filtering is per-channel.
    x = a.permute(2, 0, 1).unsqueeze(1)
    y = b.permute(2, 0, 1).unsqueeze(1)
    h, w = a.shape[0], a.shape[1]
    if min(h, w) < SSIM_WINDOW:
        return _ssim_global(x.squeeze(1), y.squeeze(1), c1, c2)
    k = _gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA, a.dtype, a.device)
    kv = k.view(1, 1, SSIM_WINDOW, 1)
    kh = k.view(1, 1, 1, SSIM_WINDOW)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(F.conv2d(t, kv), kh)

    mx = blur(x)
    my = blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    ssim_map = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(ssim_map.mean())


class BandSimilarity(NamedTuple):
    """SSIM split into the low-frequency band and the mean over detail bands."""

    ll_ssim: float
    high_ssim: float


def band_ssim(a: torch.Tensor, b: torch.Tensor) -> BandSimilarity:
    """Per-band SSIM of two images after a single wavelet level.

    The LL subband of a [0, 1] image lives in [0, 2] (orthonormal gain), so
    it is divided by 2 before SSIM; the signed detail bands live in [-1, 1]
    and are affinely shifted to [0, 1] so SSIM's dynamic-range assumption
    holds. ``high_ssim`` is the mean over the lh, hl, hh bands.
    """
    da = dwt_forward(a)
    db = dwt_forward(b)
    ll = ssim(da.ll / 2, db.ll / 2)
    high = sum(ssim((pa + 1) / 2, (pb + 1) / 2) for pa, pb in zip(da[1:], db[1:])) / 3.0
    return BandSimilarity(ll_ssim=ll, high_ssim=high)
