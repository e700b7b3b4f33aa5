"""PNG import/export. Export clamps to [0, 1] and rounds half up to 8 bits."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .distortions import quantize_uint8


def load_image(path: str | Path, resolution: tuple[int, int] | None = None) -> torch.Tensor:
    """Read an image file as a float32 3xHxW tensor in [0, 1], optionally resized (H, W)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image {path} does not exist")
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution[1], resolution[0]):
            im = im.resize((resolution[1], resolution[0]), PILImage.BICUBIC)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quantize_uint8(image), "RGB").save(path, format="PNG")
