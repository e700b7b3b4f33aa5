"""Stage 2: watermark encoder/decoder pre-training and message decoding.

The encoder only exists to teach the decoder; ``pretrain_decoder`` returns the
decoder alone. The decoder ends in global average pooling, so it produces
``n`` logits for any input of at least ``MIN_SIZE`` x ``MIN_SIZE`` pixels.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .distortions import DistortionSpec, apply_distortion, noise_layer, sample_distortion
from .errors import ConfigurationError, ContractError, DivergenceError, DomainError
from .metrics import bit_accuracy

log = logging.getLogger(__name__)

MIN_SIZE = 32


def _check_min_size(image: torch.Tensor) -> None:
    H, W = image.shape[-2:]
    if H < MIN_SIZE or W < MIN_SIZE:
        raise DomainError(f"image is {H}x{W}; the codec needs at least {MIN_SIZE}x{MIN_SIZE}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )


class WatermarkEncoder(nn.Module):
    """Image features + an upsampled learned message embedding -> residual.

    The message is mapped to a coarse ``channels x 8 x 8`` pattern and
    bilinearly stretched over the image, which gives the residual spatial
    structure to carry many bits; plain per-pixel broadcast of the bits
    learns far more slowly.

    The residual is squashed by tanh so ``alpha`` bounds its amplitude. Left
    unbounded, a message-only loss grows it until the decoder only responds
    to perturbations far larger than an invisible watermark.
    """

    def __init__(self, message_length: int = 30, channels: int = 32, blocks: int = 3, grid: int = 8):
        super().__init__()
        self.message_length = message_length
        self.channels, self.grid = channels, grid
        layers = [ConvBNReLU(3, channels)]
        layers += [ConvBNReLU(channels, channels) for _ in range(blocks - 1)]
        self.features = nn.Sequential(*layers)
        self.embed = nn.Linear(message_length, channels * grid * grid)
        self.merge = ConvBNReLU(2 * channels + 3, channels)
        self.out = nn.Conv2d(channels, 3, 1)

    def forward(self, image, message):
        H, W = image.shape[-2:]
        m = self.embed(2 * message.to(image.dtype) - 1).view(-1, self.channels, self.grid, self.grid)
        m = F.interpolate(m, size=(H, W), mode="bilinear", align_corners=False)
        return torch.tanh(self.out(self.merge(torch.cat([self.features(image), m, image], dim=1))))


class WatermarkDecoder(nn.Module):
    """Downsampling conv stack, global average pool, linear head to ``n`` logits.

    With ``antialias`` each halving is a 2x2 average pool followed by a conv
    rather than a stride-2 conv. Stride-2 convs alias, which makes the logits
    jump between nearby input scales; the averaged version varies smoothly, so
    a watermark tuned at a few resolutions also reads at the ones in between.
    """

    def __init__(self, message_length: int = 30, channels: int = 32, downsamples: int = 3, antialias: bool = True):
        super().__init__()
        self.message_length = message_length
        layers = [ConvBNReLU(3, channels)]
        for _ in range(downsamples):
            if antialias:
                layers += [nn.AvgPool2d(2), ConvBNReLU(channels, channels)]
            else:
                layers += [ConvBNReLU(channels, channels, stride=2)]
        layers += [ConvBNReLU(channels, channels)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(channels, message_length)

    def forward(self, image):
        x = self.features(image)
        return self.head(x.mean(dim=(-2, -1)))


def encode_residual(enc: WatermarkEncoder, image: torch.Tensor, msg: torch.Tensor) -> torch.Tensor:
    _check_min_size(image)
    batched = image.ndim == 4
    x = image if batched else image.unsqueeze(0)
    m = msg if msg.ndim == 2 else msg.unsqueeze(0)
    if m.shape[-1] != enc.message_length:
        raise ContractError(f"message has {m.shape[-1]} bits, encoder expects {enc.message_length}")
    r = enc(x, m)
    return r if batched else r.squeeze(0)


def make_watermarked(image: torch.Tensor, residual: torch.Tensor, alpha: float) -> torch.Tensor:
    if image.shape != residual.shape:
        raise ContractError(f"shape mismatch: {tuple(image.shape)} vs {tuple(residual.shape)}")
    return image + alpha * residual


def decode_message(dec: WatermarkDecoder, image: torch.Tensor) -> torch.Tensor:
    """Message logits for a 3xHxW image (or a batch). Uses the module's current mode."""
    _check_min_size(image)
    if image.ndim == 3:
        return dec(image.unsqueeze(0)).squeeze(0)
    return dec(image)


def harden_message(logits: torch.Tensor) -> torch.Tensor:
    """Sign threshold: 1 where the logit is strictly positive, else 0."""
    return (torch.as_tensor(logits) > 0).to(torch.int64)


def message_loss(logits: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and the {0,1} message."""
    return F.binary_cross_entropy_with_logits(logits, message.to(logits.dtype))


def random_messages(count: int, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randint(0, 2, (count, n), generator=generator)


class Lamb(torch.optim.Optimizer):
    """Layer-wise adaptive large-batch optimizer (Adam moments + trust ratio)."""

    def __init__(self, params, lr=1e-2, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.0):
        if lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = torch.tensor(0.0)
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"].item()
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                m_hat = m / (1 - beta1**t)
                v_hat = v / (1 - beta2**t)
                update = m_hat / (v_hat.sqrt() + group["eps"])
                if group["weight_decay"]:
                    update.add_(p, alpha=group["weight_decay"])
                w_norm, u_norm = p.norm(), update.norm()
                trust = (w_norm / u_norm).item() if w_norm > 0 and u_norm > 0 else 1.0
                p.add_(update, alpha=-group["lr"] * trust)
        return loss


@dataclass
class PretrainConfig:
    dataset: str | None = None
    val_dataset: str | None = None
    val_fraction: float = 0.1
    resolution: tuple[int, int] = (256, 256)
    message_length: int = 30
    alpha: float = 1.0
    optimizer: str = "lamb"
    lr: float = 1e-2
    min_lr: float = 1e-6
    epochs: int = 500
    batch_size: int = 16
    channels: int = 32
    pool: list[str] = field(
        default_factory=lambda: ["gn:0.05", "mf:7", "jpeg:50", "crop:0.25", "resize:0.5", "resize:2.0"]
    )
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("lamb", "adam"):
            raise ConfigurationError(f"optimizer must be 'lamb' or 'adam', got {self.optimizer!r}")
        if self.message_length < 1:
            raise ConfigurationError("message_length must be >= 1")
        if min(self.resolution) < MIN_SIZE:
            raise ConfigurationError(f"training resolution must be at least {MIN_SIZE}")
        if not self.pool:
            raise ConfigurationError("distortion pool is empty")
        self.distortions = [DistortionSpec.parse(s) for s in self.pool]


@dataclass
class TrainReport:
    loss_curve: list[float] = field(default_factory=list)
    accuracy_curve: list[float] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    val_accuracy: float = float("nan")
    val_per_distortion: dict[str, float] = field(default_factory=dict)
    epochs: int = 0
    wall_time: float = 0.0


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def list_images(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"dataset folder {folder} does not exist")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_folder(folder: str | Path, resolution: tuple[int, int]) -> torch.Tensor:
    from .io import load_image

    return torch.stack([load_image(p, resolution) for p in list_images(folder)])


def _optimizer_for(cfg: PretrainConfig, params):
    if cfg.optimizer == "lamb":
        return Lamb(params, lr=cfg.lr)
    return torch.optim.Adam(params, lr=cfg.lr)


@torch.no_grad()
def evaluate_codec(enc, dec, images, distortions, message_length, alpha, seed=0, batch_size=32):
    """Held-out bit accuracy per distortion with a fresh random message per image."""
    enc.eval()
    dec.eval()
    gen = torch.Generator().manual_seed(seed)
    msgs = random_messages(len(images), message_length, gen)
    results = {}
    for spec in distortions:
        correct = []
        for i in range(0, len(images), batch_size):
            x, m = images[i : i + batch_size], msgs[i : i + batch_size]
            wm = make_watermarked(x, encode_residual(enc, x, m), alpha)
            bits = harden_message(decode_message(dec, apply_distortion(wm, spec, gen)))
            correct += [bit_accuracy(a, b) for a, b in zip(m, bits)]
        results[str(spec)] = float(np.mean(correct))
    return results


def pretrain_decoder(
    cfg: PretrainConfig,
    images: torch.Tensor | None = None,
    val_images: torch.Tensor | None = None,
    resume: dict | None = None,
    return_state: bool = False,
    until_epoch: int | None = None,
):
    """Train encoder + decoder on BCE only and return ``(decoder, report)``.

    ``images``/``val_images`` override the folders in ``cfg``. With
    ``return_state`` a third item holds everything needed to resume (and the
    encoder, which callers should not ship). ``until_epoch`` stops early
    without shortening the learning-rate schedule.
    """
    if images is None:
        if cfg.dataset is None:
            raise ConfigurationError("no dataset given")
        images = load_image_folder(cfg.dataset, cfg.resolution)
        if val_images is None and cfg.val_dataset is not None:
            val_images = load_image_folder(cfg.val_dataset, cfg.resolution)
    if len(images) < 2:
        raise ConfigurationError(f"need at least 2 training images, found {len(images)}")
    if val_images is None:
        n_val = max(1, int(round(cfg.val_fraction * len(images))))
        images, val_images = images[:-n_val], images[-n_val:]

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    enc = WatermarkEncoder(cfg.message_length, cfg.channels)
    dec = WatermarkDecoder(cfg.message_length, cfg.channels)
    params = list(enc.parameters()) + list(dec.parameters())
    opt = _optimizer_for(cfg, params)
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, cfg.epochs * steps_per_epoch), eta_min=cfg.min_lr
    )
    report = TrainReport()
    start_epoch = 0
    if resume is not None:
        enc.load_state_dict(resume["encoder"])
        dec.load_state_dict(resume["decoder"])
        opt.load_state_dict(resume["optimizer"])
        sched.load_state_dict(resume["scheduler"])
        gen.set_state(resume["generator"])
        start_epoch = resume["epoch"]
        report = resume.get("report", report)

    t0 = time.perf_counter()
    step = start_epoch * steps_per_epoch
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    for epoch in range(start_epoch, stop):
        enc.train()
        dec.train()
        order = torch.randperm(len(images), generator=gen)
        losses, accs = [], []
        for i in range(0, len(images), cfg.batch_size):
            x = images[order[i : i + cfg.batch_size]]
            flip = torch.rand(len(x), generator=gen) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            msg = random_messages(len(x), cfg.message_length, gen)
            spec = sample_distortion(cfg.distortions, gen)

            wm = make_watermarked(x, encode_residual(enc, x, msg), cfg.alpha)
            logits = decode_message(dec, noise_layer(wm, spec, gen))
            loss = message_loss(logits, msg)
            if not torch.isfinite(loss):
                raise DivergenceError(step, loss.item())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            losses.append(loss.item())
            accs.append(bit_accuracy(msg, harden_message(logits.detach())))
        report.loss_curve.append(float(np.mean(losses)))
        report.accuracy_curve.append(float(np.mean(accs)))
        report.epochs = epoch + 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            per = evaluate_codec(enc, dec, val_images, cfg.distortions, cfg.message_length, cfg.alpha, cfg.seed)
            report.val_per_distortion = per
            report.val_curve.append((epoch + 1, float(np.mean(list(per.values())))))
            log.info(
                "pretrain epoch %d  loss %.4f  train acc %.2f  val acc %.2f",
                epoch + 1, report.loss_curve[-1], report.accuracy_curve[-1], report.val_curve[-1][1],
            )

    if not report.val_curve or report.val_curve[-1][0] != report.epochs:
        per = evaluate_codec(enc, dec, val_images, cfg.distortions, cfg.message_length, cfg.alpha, cfg.seed)
        report.val_per_distortion = per
    report.val_accuracy = float(np.mean(list(report.val_per_distortion.values())))
    report.wall_time += time.perf_counter() - t0
    dec.eval()
    dec.requires_grad_(False)
    if not return_state:
        return dec, report
    state = {
        "encoder": enc.state_dict(),
        "decoder": dec.state_dict(),
        "optimizer": opt.state_dict(),
        "scheduler": sched.state_dict(),
        "generator": gen.get_state(),
        "epoch": report.epochs,
        "report": report,
    }
    return dec, report, state
