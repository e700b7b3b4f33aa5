"""Sinusoidal coordinate MLP (SIREN) that stores one RGB image as a function."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, ContractError, DivergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class INRConfig:
    hidden_layers: int = 3
    hidden_width: int = 256
    first_layer_omega: float = 30.0
    hidden_omega: float = 30.0
    seed: int = 0
    in_dim: int = 2
    out_dim: int = 3

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ConfigurationError(
                f"hidden_layers and hidden_width must be >= 1, got "
                f"{self.hidden_layers} x {self.hidden_width}"
            )
        if not self.first_layer_omega > 0:
            raise ConfigurationError(f"first_layer_omega must be > 0, got {self.first_layer_omega}")
        if not self.hidden_omega > 0:
            raise ConfigurationError(f"hidden_omega must be > 0, got {self.hidden_omega}")
        if self.in_dim != 2 or self.out_dim != 3:
            raise ConfigurationError("an image INR maps (x, y) -> (r, g, b): in_dim=2, out_dim=3")


@dataclass
class OptimizerSpec:
    """Adam settings for a fit. ``steps`` counts full-grid updates."""

    lr: float = 1e-4
    steps: int = 5000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class FitReport:
    final_loss: float
    final_psnr: float
    steps: int
    wall_time: float
    loss_curve: list[float]


class Siren(nn.Module):
    """Stack of sine layers followed by a linear RGB head.

    Each sine layer computes ``sin(omega * (W x + b))``. Stored weights are
    drawn so that the effective weights ``omega * W`` are uniform on
    [-w0/n, w0/n] for the first layer and [-sqrt(6/n), sqrt(6/n)] for the rest.
    ``hidden_omega`` only rescales the parameterisation of those later layers
    (and hence Adam's effective step size); ``hidden_omega=1`` is a plain sine.
    """

    def __init__(self, config: INRConfig):
        super().__init__()
        self.config = config
        self.omega = config.first_layer_omega
        self.hidden_omega = config.hidden_omega
        width = config.hidden_width
        dims = [config.in_dim] + [width] * config.hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = nn.Linear(width, config.out_dim)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        if coords.shape[-1] != self.config.in_dim:
            raise ContractError(f"expected (..., 2) coordinates, got {tuple(coords.shape)}")
        h = torch.sin(self.omega * self.hidden[0](coords))
        for layer in self.hidden[1:]:
            h = torch.sin(self.hidden_omega * layer(h))
        return self.head(h)

    def layer_omegas(self) -> list[float]:
        return [self.omega] + [self.hidden_omega] * (len(self.hidden) - 1) + [1.0]

    def effective_weights(self) -> list[torch.Tensor]:
        layers = list(self.hidden) + [self.head]
        return [w * layer.weight for w, layer in zip(self.layer_omegas(), layers)]

    def check_shapes(self) -> None:
        """Raise ContractError unless the layer chain is 2 -> width ... -> 3."""
        cfg = self.config
        expected = [(cfg.hidden_width, cfg.in_dim)]
        expected += [(cfg.hidden_width, cfg.hidden_width)] * (cfg.hidden_layers - 1)
        expected += [(cfg.out_dim, cfg.hidden_width)]
        layers = list(self.hidden) + [self.head]
        got = [tuple(layer.weight.shape) for layer in layers]
        if got != expected:
            raise ContractError(f"layer shapes {got} do not match config {expected}")
        for layer in layers:
            if layer.bias is None or layer.bias.shape != (layer.weight.shape[0],):
                raise ContractError("every layer needs a bias vector matching its output width")


def init_siren(config: INRConfig) -> Siren:
    net = Siren(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        layers = list(net.hidden) + [net.head]
        for i, (omega, layer) in enumerate(zip(net.layer_omegas(), layers)):
            fan_in = layer.weight.shape[1]
            bound = config.first_layer_omega / fan_in if i == 0 else math.sqrt(6.0 / fan_in)
            layer.weight.uniform_(-bound / omega, bound / omega, generator=gen)
            layer.bias.uniform_(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), generator=gen)
    return net


def inr_forward(params: Siren, coords: torch.Tensor) -> torch.Tensor:
    params.check_shapes()
    return params(coords)


def fit_inr(
    image: torch.Tensor,
    config: INRConfig,
    optimizer: OptimizerSpec | None = None,
    log_every: int = 500,
) -> tuple[Siren, FitReport]:
    """Fit a fresh SIREN to ``image`` (3xHxW in [0, 1]) on the full coordinate grid."""
    from .metrics import psnr
    from .sampler import sample_image

    optimizer = optimizer or OptimizerSpec()
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected a 3xHxW image, got {tuple(image.shape)}")
    _, H, W = image.shape
    net = init_siren(config).to(image.dtype)
    opt = torch.optim.Adam(net.parameters(), lr=optimizer.lr, betas=optimizer.betas, eps=optimizer.eps)

    start = time.perf_counter()
    curve = []
    loss = None
    for step in range(optimizer.steps):
        opt.zero_grad(set_to_none=True)
        loss = torch.mean((sample_image(net, H, W) - image) ** 2)
        if not torch.isfinite(loss):
            raise DivergenceError(step, loss.item())
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("fit step %d  mse %.3e", step, curve[-1])

    with torch.no_grad():
        fitted = sample_image(net, H, W)
        final_loss = torch.mean((fitted - image) ** 2).item()
    report = FitReport(
        final_loss=final_loss,
        final_psnr=psnr(image, fitted),
        steps=optimizer.steps,
        wall_time=time.perf_counter() - start,
        loss_curve=curve,
    )
    return net, report
