"""Soft orthogonality penalty on 1x1x1 convolution kernels.

The penalty is the mean power-method estimate of the spectral norm of
``W^T W - I`` over the kernel set, scaled by ``lam``. Gradients flow through
the whole power iteration, including the normalisation between steps.
"""
from __future__ import annotations

from typing import Iterable, Mapping, NamedTuple

import torch


class PowerResult(NamedTuple):
    sigma: torch.Tensor
    degenerate: bool


def kernel_as_matrix(kernel: torch.Tensor) -> torch.Tensor:
    """``[out, in, 1, 1, 1]`` conv weight -> ``[out, in]`` matrix (rows are output channels)."""
    if kernel.dim() != 5:
        raise ValueError(f"expected a 5D conv3d kernel, got {kernel.dim()}D")
    if tuple(kernel.shape[2:]) != (1, 1, 1):
        raise ValueError(f"only 1x1x1 kernels are penalised, got extent {tuple(kernel.shape[2:])}")
    return kernel.reshape(kernel.shape[0], kernel.shape[1])


def gram_deviation(w: torch.Tensor) -> torch.Tensor:
    """``W^T W - I_n`` with ``n`` the number of input channels."""
    n = w.shape[1]
    return w.T @ w - torch.eye(n, dtype=w.dtype, device=w.device)


def _start_vector(n: int, generator: torch.Generator, dtype) -> torch.Tensor:
    while True:
        v = torch.randn(n, generator=generator, dtype=torch.float64).to(dtype)
        if torch.any(v != 0):
            return v


def power_method(m: torch.Tensor, iters: int = 1, seed: int | None = 0,
                 generator: torch.Generator | None = None) -> PowerResult:
    """Estimate ``||m||_2`` for symmetric ``m`` with ``iters`` rounds of ``u = m v; v = m u``.

    The estimate is ``||v|| / ||u||`` after the last round, which never exceeds
    the true spectral norm. If ``m`` annihilates the start vector the result is
    0 with ``degenerate=True``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if m.dim() != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {tuple(m.shape)}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    v = _start_vector(m.shape[0], generator, m.dtype)
    for k in range(iters):
        if k:
            v = v / v_norm
        u = m @ v
        u_norm = torch.linalg.vector_norm(u)
        if u_norm.item() == 0.0:
            return PowerResult(m.sum() * 0.0, True)
        v = m @ u
        v_norm = torch.linalg.vector_norm(v)
        if v_norm.item() == 0.0:
            break
    return PowerResult(v_norm / u_norm, False)


def spectral_norm_power(m: torch.Tensor, iters: int = 1, seed: int = 0) -> torch.Tensor:
    return power_method(m, iters, seed).sigma


def srip_penalty(kernels: Iterable[torch.Tensor] | Mapping[str, torch.Tensor], lam: float = 0.1,
                 iters: int = 1, seed: int = 0) -> torch.Tensor:
    """``lam / |W| * sum_W sigma(W^T W - I)`` over 1x1x1 conv kernels.

    A single generator seeded with ``seed`` supplies the start vector of each
    kernel in iteration order.
    """
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    if isinstance(kernels, Mapping):
        kernels = kernels.values()
    kernels = list(kernels)
    if not kernels:
        raise ValueError("the kernel set is empty")
    gen = torch.Generator().manual_seed(int(seed))
    total = 0.0
    for k in kernels:
        total = total + power_method(gram_deviation(kernel_as_matrix(k)), iters, generator=gen).sigma
    return lam * total / len(kernels)


@torch.no_grad()
def mean_sigma(kernels: Iterable[torch.Tensor] | Mapping[str, torch.Tensor], iters: int = 100,
               seed: int = 0) -> float:
    """Mean spectral-norm estimate over the kernel set, for monitoring."""
    if isinstance(kernels, Mapping):
        kernels = kernels.values()
    vals = [spectral_norm_power(gram_deviation(kernel_as_matrix(k.double())), iters, seed).item() for k in kernels]
    return sum(vals) / len(vals)
