"""Bit accuracy, PSNR and the normalised residual map."""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ContractError

GREY_WEIGHTS = (0.299, 0.587, 0.114)


def _as_bits(m) -> np.ndarray:
    return np.asarray(torch.as_tensor(m).detach().cpu(), dtype=np.int64).ravel()


def bit_accuracy(m, m_prime) -> float:
    """Percentage of matching bits between two {0,1} messages."""
    a, b = _as_bits(m), _as_bits(m_prime)
    if a.shape != b.shape:
        raise ContractError(f"message lengths differ: {a.size} vs {b.size}")
    errors = int(np.sum(a ^ b))
    return (1.0 - errors / a.size) * 100.0


def psnr(reference, distorted, max_value: float = 1.0) -> float:
    """PSNR in dB with one MSE over every channel; +inf for identical inputs."""
    a = torch.as_tensor(reference).detach().double()
    b = torch.as_tensor(distorted).detach().double()
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a - b) ** 2).item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def format_db(value: float) -> float | str:
    return "inf" if math.isinf(value) else value


def residual_map(original, watermarked, max_value: float = 1.0) -> torch.Tensor:
    """Greyscale |I_w - I_o| stretched to [0, max_value]; all zeros when flat."""
    a = torch.as_tensor(original).detach().double()
    b = torch.as_tensor(watermarked).detach().double()
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    r = (b - a).abs()
    grey = sum(w * r[c] for c, w in enumerate(GREY_WEIGHTS))
    lo, hi = grey.min(), grey.max()
    if hi == lo:
        return torch.zeros_like(grey)
    out = (grey - lo) / (hi - lo) * max_value
    # pin the extremes so rounding cannot leave them a ulp off
    out[grey == lo] = 0.0
    out[grey == hi] = max_value
    return out
