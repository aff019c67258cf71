"""Unpaired two-domain image datasets: disk loading, synthetic shapes, sampling.

All images are channels-first float32 tensors with values in [-1, 1].
Domain X is the source, domain Y the target; the two domains never need to
be the same size and are sampled independently.
"""

from __future__ import annotations

import colorsys
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .errors import DataLayoutError, EmptyDomainError, ImageDecodeError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# Foreground area fraction of the synthetic objects (nontrivial attention
# structure at 32x32 needs objects well above single-pixel scale).
_AREA_MIN = 0.20
_AREA_MAX = 0.50


@dataclass
class DatasetPair:
    """Two unpaired image domains plus their shared geometry.

    domain_x / domain_y are (N, C, S, S) float32 tensors in [-1, 1].
    """

    domain_x: torch.Tensor
    domain_y: torch.Tensor
    image_size: int
    channel_count: int
    flip_augment: bool = False
    paths_x: list[str] = field(default_factory=list)
    paths_y: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.domain_x.shape[0] < 1 or self.domain_y.shape[0] < 1:
            raise EmptyDomainError("both domains must contain at least one image")
        for name, dom in (("domainX", self.domain_x), ("domainY", self.domain_y)):
            expected = (self.channel_count, self.image_size, self.image_size)
            if tuple(dom.shape[1:]) != expected:
                raise DataLayoutError(f"{name} images have shape {tuple(dom.shape[1:])}, expected {expected}")

    @property
    def n_x(self) -> int:
        return self.domain_x.shape[0]

    @property
    def n_y(self) -> int:
        return self.domain_y.shape[0]

    def fingerprint(self) -> str:
        """Content hash covering geometry and every pixel of both domains."""
        h = hashlib.sha256()
        h.update(f"{self.image_size},{self.channel_count},{self.n_x},{self.n_y}".encode())
        h.update(self.domain_x.numpy().tobytes())
        h.update(self.domain_y.numpy().tobytes())
        return h.hexdigest()


def _decode_image(path: str, image_size: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")  # grayscale replicated to 3 channels
            img = img.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode image file: {path}") from exc
    arr = arr / 127.5 - 1.0  # [0, 255] -> [-1, 1]
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _list_images(directory: str) -> list[str]:
    names = sorted(
        n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS)
    )
    return [os.path.join(directory, n) for n in names]


def load_unpaired_dataset(
    root: str | os.PathLike,
    image_size: int,
    flip_augment: bool = True,
    split: str = "train",
) -> DatasetPair:
    """Load root/{trainA,trainB} (or testA/testB) into a DatasetPair.

    Every image is bilinearly resized to image_size x image_size and linearly
    mapped from [0, 255] to [-1, 1]. flip_augment marks the returned records
    as eligible for a random horizontal flip at sampling time.
    """
    root = os.fspath(root)
    if split not in ("train", "test"):
        raise DataLayoutError(f"unknown split '{split}', expected 'train' or 'test'")
    sub_x = os.path.join(root, f"{split}A")
    sub_y = os.path.join(root, f"{split}B")
    for sub in (sub_x, sub_y):
        if not os.path.isdir(sub):
            raise DataLayoutError(
                f"missing directory '{sub}': expected layout root/{{{split}A,{split}B}}/*.png|jpg"
            )
    paths_x = _list_images(sub_x)
    paths_y = _list_images(sub_y)
    if not paths_x:
        raise EmptyDomainError(f"no images found in {sub_x}")
    if not paths_y:
        raise EmptyDomainError(f"no images found in {sub_y}")
    domain_x = torch.stack([_decode_image(p, image_size) for p in paths_x])
    domain_y = torch.stack([_decode_image(p, image_size) for p in paths_y])
    return DatasetPair(
        domain_x=domain_x,
        domain_y=domain_y,
        image_size=image_size,
        channel_count=3,
        flip_augment=flip_augment,
        paths_x=paths_x,
        paths_y=paths_y,
    )


def _background(image_size: int) -> np.ndarray:
    """Fixed mid-gray texture shared by both synthetic domains, in [-1, 1]."""
    u = np.linspace(0.0, 1.0, image_size, dtype=np.float64)
    xx, yy = np.meshgrid(u, u, indexing="xy")
    grain = 0.08 * np.sin(2 * math.pi * 3 * xx) * np.sin(2 * math.pi * 3 * yy)
    ramp = 0.06 * (yy - 0.5)
    plane = -0.1 + grain + ramp
    return np.repeat(plane[None, :, :], 3, axis=0)


def _paint_object(
    canvas: np.ndarray, mask: np.ndarray, rgb: tuple[float, float, float]
) -> np.ndarray:
    out = canvas.copy()
    for c in range(3):
        fg = 2.0 * rgb[c] - 1.0
        out[c] = canvas[c] * (1.0 - mask) + fg * mask
    return out


def _circle_mask(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    idx = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(idx, idx, indexing="xy")
    dist = radius - np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip(dist + 0.5, 0.0, 1.0)  # ~1px soft edge


def _square_mask(size: int, cx: float, cy: float, half_side: float) -> np.ndarray:
    idx = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(idx, idx, indexing="xy")
    dist = np.minimum(half_side - np.abs(xx - cx), half_side - np.abs(yy - cy))
    return np.clip(dist + 0.5, 0.0, 1.0)


def synth_shapes(count_per_domain: int, image_size: int, seed: int) -> DatasetPair:
    """Deterministic toy dataset: domain X = circles, domain Y = squares.

    Objects vary in position, size and hue (X warm, Y cool) over a fixed
    background texture shared across domains, so translation must change the
    foreground while leaving the background alone. Pure function of its
    arguments: identical inputs give bit-identical datasets.
    """
    if count_per_domain < 1:
        raise ValueError("count_per_domain must be >= 1")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = np.random.Generator(np.random.PCG64(seed))
    bg = _background(image_size)
    s = float(image_size)

    def draw(shape: str) -> np.ndarray:
        if shape == "circle":
            lo, hi = math.sqrt(_AREA_MIN / math.pi), math.sqrt(_AREA_MAX / math.pi)
            extent = rng.uniform(lo * s, hi * s)  # radius
            hue = rng.uniform(-0.04, 0.06) % 1.0  # warm: red/orange
        else:
            lo, hi = math.sqrt(_AREA_MIN) / 2.0, math.sqrt(_AREA_MAX) / 2.0
            extent = rng.uniform(lo * s, hi * s)  # half side
            hue = rng.uniform(0.55, 0.65)  # cool: blue/cyan
        cx = rng.uniform(extent, s - 1.0 - extent)
        cy = rng.uniform(extent, s - 1.0 - extent)
        sat = rng.uniform(0.75, 1.0)
        val = rng.uniform(0.7, 1.0)
        rgb = colorsys.hsv_to_rgb(hue, sat, val)
        if shape == "circle":
            mask = _circle_mask(image_size, cx, cy, extent)
        else:
            mask = _square_mask(image_size, cx, cy, extent)
        return _paint_object(bg, mask, rgb)

    domain_x = np.stack([draw("circle") for _ in range(count_per_domain)])
    domain_y = np.stack([draw("square") for _ in range(count_per_domain)])
    return DatasetPair(
        domain_x=torch.from_numpy(domain_x.astype(np.float32)),
        domain_y=torch.from_numpy(domain_y.astype(np.float32)),
        image_size=image_size,
        channel_count=3,
        flip_augment=False,
    )


def next_batch(
    dataset: DatasetPair, rng: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample one image per domain, uniformly and independently (batch size 1).

    Consumes a fixed number of draws from rng per call, so a given generator
    state always reproduces the same pair (flip included).
    """
    ix = int(torch.randint(dataset.n_x, (1,), generator=rng))
    iy = int(torch.randint(dataset.n_y, (1,), generator=rng))
    x = dataset.domain_x[ix : ix + 1]
    y = dataset.domain_y[iy : iy + 1]
    if dataset.flip_augment:
        if int(torch.randint(2, (1,), generator=rng)):
            x = torch.flip(x, dims=[3])
        if int(torch.randint(2, (1,), generator=rng)):
            y = torch.flip(y, dims=[3])
    if __debug__:
        for t in (x, y):
            assert t.shape == (1, dataset.channel_count, dataset.image_size, dataset.image_size)
            assert float(t.min()) >= -1.0 and float(t.max()) <= 1.0
    return x, y


def _to_png(tensor: torch.Tensor) -> Image.Image:
    arr = ((tensor.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    return Image.fromarray(arr.transpose(1, 2, 0))


def export_dataset(dataset: DatasetPair, root: str | os.PathLike, split: str = "train") -> None:
    """Write a DatasetPair to root/{split}A,{split}B as PNG files."""
    root = os.fspath(root)
    for sub, dom in ((f"{split}A", dataset.domain_x), (f"{split}B", dataset.domain_y)):
        out_dir = os.path.join(root, sub)
        os.makedirs(out_dir, exist_ok=True)
        for i in range(dom.shape[0]):
            _to_png(dom[i]).save(os.path.join(out_dir, f"{i:06d}.png"))
