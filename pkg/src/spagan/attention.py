"""Spatial attention maps derived from discriminator activations.

The map is the per-location sum (or max) of absolute feature-plane values,
normalized so its maximum is exactly 1, upsampled to the image size and
applied as a channel-broadcast element-wise product. Maps are constants with
respect to differentiation: no gradient flows through them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as torchf
from PIL import Image

from .errors import ShapeError
from .networks import ActivationStack, PatchDiscriminator, discriminator_forward


class AttentionMode(str, Enum):
    SUM = "SUM"
    MAX = "MAX"


class UpsampleMethod(str, Enum):
    NEAREST = "NEAREST"
    BILINEAR = "BILINEAR"


@dataclass
class AttentionMap:
    """Non-negative spatial map, shape (B, 1, H, W)."""

    values: torch.Tensor
    source_layer: str
    normalized: bool

    def __post_init__(self):
        if self.values.dim() != 4 or self.values.shape[1] != 1:
            raise ShapeError(f"attention map must be (B, 1, H, W), got {tuple(self.values.shape)}")


def identity_map(
    batch: int, height: int, width: int, dtype: torch.dtype = torch.float32
) -> AttentionMap:
    """All-ones map: applying it leaves the image unchanged."""
    return AttentionMap(torch.ones(batch, 1, height, width, dtype=dtype), "identity", True)


def raw_attention(stack: ActivationStack, mode: AttentionMode = AttentionMode.SUM) -> AttentionMap:
    """Collapse C feature planes into one unnormalized map.

    SUM: sum of absolute plane values per location; MAX: their maximum.
    """
    planes = stack.planes
    if planes.shape[1] < 1:
        raise ShapeError("activation stack has no planes")
    mode = AttentionMode(mode)
    if mode is AttentionMode.SUM:
        values = planes.abs().sum(dim=1, keepdim=True)
    else:
        values = planes.abs().amax(dim=1, keepdim=True)
    return AttentionMap(values, stack.layer_name, normalized=False)


def normalize_map(attn: AttentionMap) -> AttentionMap:
    """Divide by the per-image maximum; an all-zero map becomes all ones.

    The all-ones fallback keeps degenerate attention from annihilating the
    image; attended and raw inputs then coincide.
    """
    values = attn.values
    maxima = values.amax(dim=(2, 3), keepdim=True)
    ones = torch.ones_like(values)
    scaled = torch.where(maxima > 0, values / maxima.clamp_min(torch.finfo(values.dtype).tiny), ones)
    return AttentionMap(scaled, attn.source_layer, normalized=True)


def upsample_map(
    attn: AttentionMap,
    target_h: int,
    target_w: int,
    method: UpsampleMethod = UpsampleMethod.NEAREST,
) -> AttentionMap:
    """Resize a normalized map up to the image geometry (never down)."""
    h, w = attn.values.shape[2], attn.values.shape[3]
    if target_h < h or target_w < w:
        raise ShapeError(f"attention is only upsampled: {h}x{w} -> {target_h}x{target_w} shrinks")
    if (h, w) == (target_h, target_w):
        return AttentionMap(attn.values, attn.source_layer, attn.normalized)
    method = UpsampleMethod(method)
    if method is UpsampleMethod.NEAREST:
        values = torchf.interpolate(attn.values, size=(target_h, target_w), mode="nearest")
    else:
        values = torchf.interpolate(
            attn.values, size=(target_h, target_w), mode="bilinear", align_corners=False
        ).clamp(0.0, 1.0)
    return AttentionMap(values, attn.source_layer, attn.normalized)


def apply_attention(img: torch.Tensor, attn: AttentionMap) -> torch.Tensor:
    """Element-wise product, the single map broadcast across channels."""
    if img.dim() != 4:
        raise ShapeError(f"expected image batch (B, C, H, W), got {tuple(img.shape)}")
    if img.shape[0] != attn.values.shape[0] or img.shape[2:] != attn.values.shape[2:]:
        raise ShapeError(
            f"attention map {tuple(attn.values.shape)} does not match image {tuple(img.shape)}"
        )
    return img * attn.values


def attend(
    disc: PatchDiscriminator,
    img: torch.Tensor,
    mode: AttentionMode = AttentionMode.SUM,
    method: UpsampleMethod = UpsampleMethod.NEAREST,
) -> tuple[torch.Tensor, AttentionMap]:
    """Full pipeline: discriminator tap -> raw map -> normalize -> upsample -> apply.

    The map is computed without autograd tracking, so downstream losses never
    push gradient into the discriminator through it.
    """
    with torch.no_grad():
        _, stack = discriminator_forward(disc, img)
        attn = normalize_map(raw_attention(stack, mode))
        attn = upsample_map(attn, img.shape[2], img.shape[3], method)
    return apply_attention(img, attn), attn


_HEAT_STOPS = np.array(
    [[0, 0, 0], [32, 12, 96], [115, 9, 116], [205, 62, 78], [250, 160, 58], [252, 253, 191]],
    dtype=np.float64,
)


def _colorize(values: np.ndarray) -> np.ndarray:
    # Piecewise-linear dark-to-light heat palette over [0, 1].
    pos = np.clip(values, 0.0, 1.0) * (len(_HEAT_STOPS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_HEAT_STOPS) - 1)
    frac = (pos - lo)[..., None]
    rgb = _HEAT_STOPS[lo] * (1.0 - frac) + _HEAT_STOPS[hi] * frac
    return rgb.round().astype(np.uint8)


def save_heatmap_png(
    attn: AttentionMap,
    path: str | os.PathLike,
    image: torch.Tensor | None = None,
    colormap: str = "gray",
) -> None:
    """Render one map (index 0 of the batch) to an 8-bit PNG.

    With `image` given, writes a side-by-side panel of the image and its map.
    colormap: "gray" or "heat".
    """
    values = attn.values[0, 0].detach().cpu().numpy()
    if colormap == "gray":
        panel = np.repeat((np.clip(values, 0, 1) * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    elif colormap == "heat":
        panel = _colorize(values)
    else:
        raise ValueError(f"unknown colormap '{colormap}'")
    if image is not None:
        img = ((image[0].detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
        img = img.numpy().transpose(1, 2, 0)
        if img.shape[:2] != panel.shape[:2]:
            raise ShapeError("image and attention map sizes differ")
        panel = np.concatenate([img, panel], axis=1)
    Image.fromarray(panel).save(os.fspath(path))
