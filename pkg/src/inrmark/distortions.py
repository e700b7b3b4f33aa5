"""Attack suite used as training noise layers and as test-time attacks.

Images are ``3xHxW`` or batched ``Nx3xHxW`` float tensors in [0, 1]. Every
stochastic attack draws from an explicit ``torch.Generator`` so a run can be
replayed exactly.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ContractError, DomainError

KINDS = ("identity", "gn", "mf", "jpeg", "crop", "resize")
ALIASES = {
    "identity": "identity",
    "none": "identity",
    "gn": "gn",
    "gaussian": "gn",
    "gaussiannoise": "gn",
    "gaussian_noise": "gn",
    "mf": "mf",
    "median": "mf",
    "medianfilter": "mf",
    "median_filter": "mf",
    "jpeg": "jpeg",
    "crop": "crop",
    "resize": "resize",
}
# attacks with no useful gradient; training routes them through forward_asl
STRAIGHT_THROUGH = frozenset({"jpeg", "mf"})


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    param: float | None = None

    def __post_init__(self):
        kind = ALIASES.get(self.kind.lower())
        if kind is None:
            raise DomainError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        p = self.param
        if kind != "identity" and p is None:
            raise DomainError(f"{kind} needs a parameter")
        if kind == "gn" and not p >= 0:
            raise DomainError(f"GN sigma must be >= 0, got {p}")
        if kind == "mf" and (p < 1 or int(p) != p or int(p) % 2 == 0):
            raise DomainError(f"MF kernel must be an odd integer >= 1, got {p}")
        if kind == "jpeg" and not 1 <= p <= 100:
            raise DomainError(f"JPEG quality must be in [1, 100], got {p}")
        if kind == "crop" and not 0 < p <= 1:
            raise DomainError(f"crop area ratio must be in (0, 1], got {p}")
        if kind == "resize" and not p > 0:
            raise DomainError(f"resize scale must be > 0, got {p}")

    @classmethod
    def parse(cls, text: str) -> DistortionSpec:
        """Parse ``kind[:param]`` strings such as ``jpeg:50`` or ``crop:0.25``."""
        kind, _, param = text.strip().partition(":")
        if not kind:
            raise DomainError(f"empty distortion spec {text!r}")
        try:
            value = float(param) if param else None
        except ValueError:
            raise DomainError(f"bad parameter in distortion spec {text!r}") from None
        return cls(kind, value)

    def __str__(self) -> str:
        if self.kind == "identity":
            return "identity"
        p = self.param
        return f"{self.kind}:{int(p) if p == int(p) and self.kind in ('mf', 'jpeg') else p:g}"

    @property
    def changes_size(self) -> bool:
        return self.kind in ("crop", "resize")


DEFAULT_TRAIN_POOL = tuple(
    DistortionSpec.parse(s)
    for s in ("gn:0.05", "mf:7", "jpeg:50", "crop:0.25", "resize:0.5", "resize:2.0")
)
DEFAULT_TEST_POOL = (DistortionSpec("identity"),) + DEFAULT_TRAIN_POOL


def _batched(fn):
    def wrapper(image, *args, **kwargs):
        if image.ndim == 3:
            return fn(image.unsqueeze(0), *args, **kwargs).squeeze(0)
        if image.ndim != 4 or image.shape[1] != 3:
            raise ContractError(f"expected 3xHxW or Nx3xHxW, got {tuple(image.shape)}")
        return fn(image, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def gaussian_noise(x, sigma, generator=None):
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x + sigma * noise


@_batched
def median_filter(x, kernel):
    k = int(kernel)
    H, W = x.shape[-2:]
    if k > H or k > W:
        raise DomainError(f"median kernel {k} larger than {H}x{W} image")
    if k == 1:
        return x.clone()
    pad = k // 2
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    patches = padded.unfold(2, k, 1).unfold(3, k, 1)
    return patches.reshape(*patches.shape[:4], k * k).median(dim=-1).values


def quantize_uint8(x: torch.Tensor) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits; returns HxWx3 (or Nx...)."""
    q = torch.floor(x.detach().clamp(0, 1).double() * 255 + 0.5).to(torch.uint8)
    return q.movedim(-3, -1).cpu().numpy()


@_batched
def jpeg(x, quality):
    out = []
    for img in quantize_uint8(x):
        buf = io.BytesIO()
        PILImage.fromarray(img, "RGB").save(buf, format="JPEG", quality=int(round(quality)))
        buf.seek(0)
        decoded = np.asarray(PILImage.open(buf).convert("RGB"), dtype=np.float64) / 255.0
        out.append(torch.from_numpy(decoded).permute(2, 0, 1))
    return torch.stack(out).to(x.dtype)


def crop_size(H: int, W: int, area: float) -> tuple[int, int]:
    side = math.sqrt(area)
    h, w = math.floor(side * H), math.floor(side * W)
    if h < 1 or w < 1:
        raise DomainError(f"crop({area}) of a {H}x{W} image is smaller than 1x1")
    return h, w


@_batched
def random_crop(x, area, generator=None):
    H, W = x.shape[-2:]
    h, w = crop_size(H, W, area)
    top = int(torch.randint(H - h + 1, (1,), generator=generator))
    left = int(torch.randint(W - w + 1, (1,), generator=generator))
    return x[..., top : top + h, left : left + w]


def resize_size(H: int, W: int, scale: float) -> tuple[int, int]:
    h, w = math.floor(scale * H + 0.5), math.floor(scale * W + 0.5)
    if h < 1 or w < 1:
        raise DomainError(f"resize({scale}) of a {H}x{W} image is smaller than 1x1")
    return h, w


@_batched
def resize(x, scale):
    size = resize_size(*x.shape[-2:], scale)
    if size == tuple(x.shape[-2:]):
        return x
    # half-pixel centres, no antialiasing; clamp keeps rounding inside the input range
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return torch.minimum(torch.maximum(out, x.amin()), x.amax())


def apply_distortion(image: torch.Tensor, spec: DistortionSpec, generator: torch.Generator | None = None):
    """Apply one attack. JPEG and MF here carry no gradient; see ``noise_layer``."""
    kind, p = spec.kind, spec.param
    if kind == "identity":
        return image
    if kind == "gn":
        return gaussian_noise(image, p, generator=generator)
    if kind == "mf":
        return median_filter(image, p)
    if kind == "jpeg":
        return jpeg(image, p)
    if kind == "crop":
        return random_crop(image, p, generator=generator)
    if kind == "resize":
        return resize(image, p)
    raise DomainError(f"unhandled distortion {spec}")


def forward_asl(watermarked: torch.Tensor, distorted: torch.Tensor) -> torch.Tensor:
    """Straight-through: the value of ``distorted``, the gradient of ``watermarked``.

    Same as ``watermarked + (distorted - watermarked).detach()`` but written so the
    forward value equals ``distorted`` exactly instead of up to rounding.
    """
    if watermarked.shape != distorted.shape:
        raise ContractError(
            f"forward ASL needs matching shapes, got {tuple(watermarked.shape)} "
            f"and {tuple(distorted.shape)}"
        )
    return distorted.detach() + (watermarked - watermarked.detach())


def noise_layer(image: torch.Tensor, spec: DistortionSpec, generator: torch.Generator | None = None):
    """Training-time attack: differentiable kinds run natively, the rest straight-through."""
    if spec.kind in STRAIGHT_THROUGH:
        with torch.no_grad():
            distorted = apply_distortion(image, spec, generator)
        return forward_asl(image, distorted)
    return apply_distortion(image, spec, generator)


def sample_distortion(pool, generator: torch.Generator | None = None) -> DistortionSpec:
    if not pool:
        raise DomainError("cannot sample from an empty distortion pool")
    return pool[int(torch.randint(len(pool), (1,), generator=generator))]
