"""Image loading and seeded random-crop batches."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import InputError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# scikit-image ships these photographs; disjoint sets for training and evaluation
BUILTIN_TRAIN = ("astronaut", "coffee", "rocket", "immunohistochemistry", "hubble_deep_field", "retina")
BUILTIN_HELDOUT = ("chelsea", "motorcycle_left")


def read_image(path: str | Path) -> torch.Tensor:
    """8-bit image file -> float32 tensor (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return to_tensor(arr)


def write_image(x: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(x)).save(path)


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.shape[-1] == 4:
        arr = arr[..., :3]
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float() / 255.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    x = x.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return x.permute(1, 2, 0).cpu().numpy()


def list_images(directory: str | Path) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"no images found in {directory}")
    return files


def builtin_images(names: Sequence[str]) -> list[torch.Tensor]:
    import skimage.data

    data_dir = Path(skimage.data.__file__).parent
    out = []
    for name in names:
        loader = getattr(skimage.data, name, None)
        if loader is not None:
            out.append(to_tensor(np.asarray(loader())))
        else:
            out.append(read_image(data_dir / f"{name}.png"))
    return out


def heldout_crops(n: int = 8, size: int = 64) -> list[torch.Tensor]:
    """Deterministic crops from the held-out photographs, spread on a grid."""
    images = builtin_images(BUILTIN_HELDOUT)
    crops = []
    per = -(-n // len(images))
    for img in images:
        _, H, W = img.shape
        ys = np.linspace(0, H - size, per + 2)[1:-1].astype(int)
        xs = np.linspace(0, W - size, per + 2)[1:-1].astype(int)
        for y, x in zip(ys, xs):
            crops.append(img[:, y:y + size, x:x + size].clone())
    return crops[:n]


class CropDataset:
    """Random square crops with a horizontal flip, fully determined by ``(seed, step)``."""

    def __init__(self, images: Iterable[torch.Tensor], crop: int = 64, seed: int = 0):
        self.images = [im for im in images if im.shape[-1] >= crop and im.shape[-2] >= crop]
        if not self.images:
            raise InputError("dataset is empty (no image at least as large as the crop)")
        self.crop = crop
        self.seed = seed

    @classmethod
    def from_dir(cls, directory: str | Path, crop: int = 64, seed: int = 0) -> "CropDataset":
        return cls([read_image(p) for p in list_images(directory)], crop, seed)

    @classmethod
    def builtin(cls, crop: int = 64, seed: int = 0) -> "CropDataset":
        return cls(builtin_images(BUILTIN_TRAIN), crop, seed)

    def generator(self, step: int, salt: int = 0) -> torch.Generator:
        return torch.Generator().manual_seed((self.seed * 1_000_003 + step * 7919 + salt) % (2**63))

    def batch(self, step: int, batch_size: int) -> torch.Tensor:
        g = self.generator(step)
        out = []
        for _ in range(batch_size):
            img = self.images[int(torch.randint(len(self.images), (1,), generator=g))]
            _, H, W = img.shape
            y = int(torch.randint(H - self.crop + 1, (1,), generator=g))
            x = int(torch.randint(W - self.crop + 1, (1,), generator=g))
            c = img[:, y:y + self.crop, x:x + self.crop]
            if torch.rand(1, generator=g).item() < 0.5:
                c = c.flip(-1)
            out.append(c)
        return torch.stack(out)
