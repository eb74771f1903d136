"""Shared test oracles: brute-force references kept independent of the
implementation paths they check."""

from __future__ import annotations

import numpy as np
import torch


def haar_subbands_bruteforce(img: np.ndarray) -> dict[str, np.ndarray]:
    """Apply the four orthonormal 2x2 Haar masks with explicit loops."""
    h, w, c = img.shape
    out = {k: np.zeros((h // 2, w // 2, c)) for k in ("ll", "lh", "hl", "hh")}
    masks = {
        "ll": np.array([[1.0, 1.0], [1.0, 1.0]]) / 2,
        "lh": np.array([[1.0, -1.0], [1.0, -1.0]]) / 2,
        "hl": np.array([[1.0, 1.0], [-1.0, -1.0]]) / 2,
        "hh": np.array([[1.0, -1.0], [-1.0, 1.0]]) / 2,
    }
    for name, mask in masks.items():
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    block = img[2 * i : 2 * i + 2, 2 * j : 2 * j + 2, ch]
                    out[name][i, j, ch] = float((block * mask).sum())
    return out


def central_diff_grad(fn, x: torch.Tensor, coords, eps: float = 1e-5) -> dict[tuple, float]:
    """Central finite differences of a scalar function at selected coordinates."""
    grads = {}
    for coord in coords:
        xp = x.detach().clone()
        xm = x.detach().clone()
        xp[coord] += eps
        xm[coord] -= eps
        grads[tuple(coord)] = (float(fn(xp)) - float(fn(xm))) / (2 * eps)
    return grads


def assert_grad_matches_fd(fn, x: torch.Tensor, n_coords: int = 20, eps: float = 1e-5,
                           rel_tol: float = 1e-3, seed: int = 0) -> None:
    """Compare autograd gradients of ``fn`` at random coordinates of ``x``
    against central finite differences."""
    rng = np.random.default_rng(seed)
    xg = x.detach().clone().requires_grad_(True)
    out = fn(xg)
    out.backward()
    grad = xg.grad
    assert grad is not None
    flat_idx = rng.choice(x.numel(), size=min(n_coords, x.numel()), replace=False)
    coords = [np.unravel_index(int(i), tuple(x.shape)) for i in flat_idx]
    fd = central_diff_grad(fn, x, coords, eps=eps)
    for coord, fd_val in fd.items():
        an_val = float(grad[coord])
        denom = max(abs(fd_val), abs(an_val), 1e-8)
        assert abs(an_val - fd_val) / denom < rel_tol, (
            f"gradient mismatch at {coord}: autograd {an_val}, fd {fd_val}"
        )


def rand_image(h: int, w: int, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=(h, w, 3))).to(dtype)
