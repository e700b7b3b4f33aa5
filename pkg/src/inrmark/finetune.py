"""Stage 3: fine-tune a fitted INR so every sampled resolution carries a message."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import decode_message, harden_message, message_loss
from .distortions import DistortionSpec, apply_distortion, noise_layer, quantize_uint8
from .errors import ConfigurationError, ContractError, DivergenceError, DomainError
from .metrics import bit_accuracy, psnr
from .sampler import sample_image
from .siren import Siren

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    resolutions: list[tuple[int, int]] = field(default_factory=lambda: [(256, 256), (384, 384), (512, 512)])
    pool: list[str] = field(
        default_factory=lambda: ["gn:0.05", "mf:7", "jpeg:50", "crop:0.25", "resize:0.5", "resize:2.0"]
    )
    lambda_msg: float = 3e3
    lambda_img: float = 5e5
    lr: float = 5e-5
    epochs: int = 500
    eval_every: int = 10
    eval_resolutions: list[tuple[int, int]] | None = None
    seed: int = 0

    def __post_init__(self):
        self.resolutions = [tuple(r) for r in self.resolutions]
        if self.eval_resolutions is not None:
            self.eval_resolutions = [tuple(r) for r in self.eval_resolutions]
        if not self.resolutions:
            raise ConfigurationError("resolutions must be non-empty")
        if not self.pool:
            raise ConfigurationError("distortion pool must be non-empty")
        if not (self.lambda_msg > 0 and self.lambda_img > 0):
            raise ConfigurationError("lambda_msg and lambda_img must both be > 0")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        self.distortions = [DistortionSpec.parse(s) for s in self.pool]


@dataclass(frozen=True)
class SchedulePair:
    resolution: tuple[int, int]
    distortion: DistortionSpec


@dataclass
class LossBreakdown:
    total: float
    msg: float
    img: float
    bit_accuracy: float


@dataclass
class FinetuneReport:
    loss_curve: list[LossBreakdown] = field(default_factory=list)
    eval_history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = float("nan")
    best_psnr: float = float("nan")
    best_rows: list[dict] = field(default_factory=list)
    epochs: int = 0
    wall_time: float = 0.0


def generate_message(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    if n < 1:
        raise DomainError(f"message length must be >= 1, got {n}")
    return torch.randint(0, 2, (n,), generator=generator)


def epoch_pair_schedule(resolutions, pool, generator: torch.Generator | None = None) -> list[SchedulePair]:
    """Every (resolution, distortion) pair once, in random order."""
    if not resolutions or not pool:
        raise DomainError("resolutions and pool must both be non-empty")
    pairs = [SchedulePair(tuple(r), d) for r in resolutions for d in pool]
    return [pairs[i] for i in torch.randperm(len(pairs), generator=generator).tolist()]


def _assert_frozen(*modules) -> None:
    for m in modules:
        if any(p.requires_grad for p in m.parameters()):
            raise ContractError(f"{type(m).__name__} must be frozen (requires_grad=False)")


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    module.requires_grad_(False)
    return module


def finetune_step(
    wm_inr: Siren,
    clean_inr: Siren,
    decoder,
    pair: SchedulePair,
    msg: torch.Tensor,
    lambda_msg: float = 3e3,
    lambda_img: float = 5e5,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
    clean_sample: torch.Tensor | None = None,
) -> LossBreakdown:
    """One fine-tuning update (or just the losses when ``optimizer`` is None).

    The message term sees the attacked sample (a crop reaches the decoder at
    its reduced size); the fidelity term always compares full samples.
    """
    _assert_frozen(clean_inr, decoder)
    H, W = pair.resolution
    if clean_sample is None:
        with torch.no_grad():
            clean_sample = sample_image(clean_inr, H, W)
    sample = sample_image(wm_inr, H, W)
    noised = noise_layer(sample, pair.distortion, generator)
    logits = decode_message(decoder, noised)
    l_msg = message_loss(logits, msg)
    l_img = torch.mean((sample - clean_sample) ** 2)
    total = lambda_msg * l_msg + lambda_img * l_img
    if not torch.isfinite(total):
        raise DivergenceError(-1, total.item())
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
    return LossBreakdown(
        total=total.item(),
        msg=l_msg.item(),
        img=l_img.item(),
        bit_accuracy=bit_accuracy(msg, harden_message(logits.detach())),
    )


@torch.no_grad()
def evaluate_inr(
    wm_inr: Siren,
    clean_inr: Siren,
    decoder,
    msg: torch.Tensor,
    resolutions,
    distortions,
    seed: int = 0,
    quantize: bool = False,
) -> list[dict]:
    """One row per (resolution, distortion): bit accuracy and PSNR of F_wm vs F_im.

    With ``quantize`` both samples are first rounded to 8 bits, as a published
    PNG would be, before attacking and measuring.
    """
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for H, W in resolutions:
        wm = sample_image(wm_inr, H, W)
        clean = sample_image(clean_inr, H, W)
        if quantize:
            wm, clean = _to_8bit(wm), _to_8bit(clean)
        quality = psnr(clean, wm)
        for spec in distortions:
            attacked = apply_distortion(wm, spec, gen)
            bits = harden_message(decode_message(decoder, attacked))
            rows.append(
                {
                    "height": H,
                    "width": W,
                    "distortion": str(spec),
                    "bit_accuracy": bit_accuracy(msg, bits),
                    "psnr": quality,
                }
            )
    return rows


def _to_8bit(image: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(quantize_uint8(image)).permute(2, 0, 1).to(image.dtype) / 255.0


def summarize(rows: list[dict]) -> tuple[float, float]:
    acc = float(np.mean([r["bit_accuracy"] for r in rows]))
    psnrs = {(r["height"], r["width"]): r["psnr"] for r in rows}
    return acc, float(np.mean(list(psnrs.values())))


def finetune(
    clean_inr: Siren,
    decoder,
    msg: torch.Tensor,
    cfg: FinetuneConfig,
    on_step=None,
) -> tuple[Siren, FinetuneReport]:
    """Fine-tune a copy of ``clean_inr`` against the frozen ``decoder``.

    Each epoch drains one shuffled (resolution x distortion) schedule. The
    returned INR is the evaluated snapshot with the highest mean bit accuracy
    over the evaluation grid, ties going to higher PSNR.
    """
    if msg.ndim != 1 or msg.numel() != decoder.message_length:
        raise ContractError(f"message of {msg.numel()} bits, decoder expects {decoder.message_length}")
    freeze(clean_inr)
    freeze(decoder)
    wm_inr = copy.deepcopy(clean_inr).requires_grad_(True)
    opt = torch.optim.Adam(wm_inr.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    eval_res = cfg.eval_resolutions or cfg.resolutions
    with torch.no_grad():
        clean = {r: sample_image(clean_inr, *r) for r in cfg.resolutions}

    report = FinetuneReport()
    best_key, best_state = None, None
    t0 = time.perf_counter()

    def consider(epoch):
        nonlocal best_key, best_state
        rows = evaluate_inr(wm_inr, clean_inr, decoder, msg, eval_res, cfg.distortions, seed=cfg.seed)
        acc, quality = summarize(rows)
        report.eval_history.append({"epoch": epoch, "bit_accuracy": acc, "psnr": quality})
        log.info("finetune epoch %d  eval acc %.2f  psnr %.2f", epoch, acc, quality)
        if best_key is None or (acc, quality) > best_key:
            best_key = (acc, quality)
            best_state = copy.deepcopy(wm_inr.state_dict())
            report.best_epoch, report.best_accuracy, report.best_psnr = epoch, acc, quality
            report.best_rows = rows

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for pair in epoch_pair_schedule(cfg.resolutions, cfg.distortions, gen):
            try:
                losses = finetune_step(
                    wm_inr, clean_inr, decoder, pair, msg, cfg.lambda_msg, cfg.lambda_img,
                    optimizer=opt, generator=gen, clean_sample=clean[pair.resolution],
                )
            except DivergenceError as err:
                raise DivergenceError(step, err.value) from None
            report.loss_curve.append(losses)
            if on_step is not None:
                on_step(epoch, pair, losses)
            step += 1
        report.epochs = epoch
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            consider(epoch)
    if best_state is None:
        consider(0)
    else:
        wm_inr.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - t0
    return freeze(wm_inr), report
