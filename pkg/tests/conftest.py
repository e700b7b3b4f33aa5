from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "retina", "hubble_deep_field")


def _sources():
    import skimage.data

    return [getattr(skimage.data, name)() for name in SOURCES]


def make_desk_dataset(out: Path, count: int, size: int, seed: int) -> Path:
    """Random square crops of the scikit-image sample photos, resized to ``size``."""
    rng = np.random.default_rng(seed)
    srcs = _sources()
    out.mkdir(parents=True, exist_ok=True)
    for k in range(count):
        src = srcs[rng.integers(len(srcs))]
        H, W = src.shape[:2]
        side = int(rng.integers(size, min(H, W) // 2 + 1))
        top, left = rng.integers(H - side + 1), rng.integers(W - side + 1)
        crop = Image.fromarray(src[top : top + side, left : left + side])
        crop.resize((size, size), Image.BICUBIC).save(out / f"{k:04d}.png")
    return out


def natural_image(size: int = 64) -> torch.Tensor:
    import skimage.data

    src = Image.fromarray(skimage.data.astronaut()[:256, 100:356])
    arr = np.asarray(src.resize((size, size), Image.BICUBIC), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def astronaut64():
    return natural_image(64)
