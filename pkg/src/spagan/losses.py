"""Scalar training objectives: least-squares adversarial, cycle, feature-map.

All functions take torch tensors and return differentiable 0-dim tensors.
The discriminator target is 1 for real and 0 for fake, with the usual 1/2
factor on the discriminator side.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import torch

from .errors import ShapeError
from .networks import ActivationStack

LOSS_CSV_COLUMNS = ("step", "dLossX", "dLossY", "gAdvLoss", "fAdvLoss", "cycLoss", "fmLoss", "totalGen")


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_fm: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_fm"):
            v = getattr(self, name)
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossRecord:
    """Per-step scalar losses; total_gen is recomputed from the components."""

    step: int
    d_loss_x: float
    d_loss_y: float
    g_adv_loss: float
    f_adv_loss: float
    cyc_loss: float
    fm_loss: float
    total_gen: float
    lambda_cyc: float = 10.0
    lambda_fm: float = 1.0

    @classmethod
    def from_components(
        cls,
        step: int,
        d_loss_x: float,
        d_loss_y: float,
        g_adv_loss: float,
        f_adv_loss: float,
        cyc_loss: float,
        fm_loss: float,
        weights: LossWeights,
    ) -> "LossRecord":
        total = g_adv_loss + f_adv_loss + weights.lambda_cyc * cyc_loss + weights.lambda_fm * fm_loss
        return cls(
            step, d_loss_x, d_loss_y, g_adv_loss, f_adv_loss, cyc_loss, fm_loss,
            total, weights.lambda_cyc, weights.lambda_fm,
        )

    def csv_row(self) -> list[str]:
        return [
            str(self.step),
            repr(self.d_loss_x), repr(self.d_loss_y),
            repr(self.g_adv_loss), repr(self.f_adv_loss),
            repr(self.cyc_loss), repr(self.fm_loss), repr(self.total_gen),
        ]


def write_loss_csv_header(fh) -> csv.writer:
    writer = csv.writer(fh)
    writer.writerow(LOSS_CSV_COLUMNS)
    return writer


def read_loss_csv(path: str | os.PathLike) -> list[dict[str, float]]:
    rows = []
    with open(os.fspath(path), newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
    return rows


def _require_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError(f"{name}: non-finite input tensor")


def lsgan_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2) over all patch positions."""
    _require_finite("lsgan_d_loss", real_logits, fake_logits)
    return 0.5 * ((real_logits - 1.0) ** 2).mean() + 0.5 * (fake_logits**2).mean()


def lsgan_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """mean((fake - 1)^2): the generator pushes its fakes toward the real target."""
    _require_finite("lsgan_g_loss", fake_logits)
    return ((fake_logits - 1.0) ** 2).mean()


def cycle_loss(
    rec_x: torch.Tensor, x_a: torch.Tensor, rec_y: torch.Tensor, y_a: torch.Tensor
) -> torch.Tensor:
    """Mean absolute reconstruction error against the attended inputs, both directions."""
    if rec_x.shape != x_a.shape or rec_y.shape != y_a.shape:
        raise ShapeError("cycle_loss: reconstruction/target shapes differ")
    return (rec_x - x_a).abs().mean() + (rec_y - y_a).abs().mean()


def _fm_half(real: ActivationStack, fake: ActivationStack, size_average: bool) -> torch.Tensor:
    if real.planes.shape != fake.planes.shape:
        raise ShapeError(
            f"feature_map_loss: stack geometry mismatch {tuple(real.planes.shape)} vs {tuple(fake.planes.shape)}"
        )
    diff = (real.planes - fake.planes).abs()
    per_plane = diff.sum(dim=(2, 3))  # L1 norm of each plane
    if size_average:
        per_plane = per_plane / (diff.shape[2] * diff.shape[3])
    return per_plane.mean(dim=1).mean()  # 1/C over planes, then over batch


def feature_map_loss(
    g_tap_real: ActivationStack,
    g_tap_fake: ActivationStack,
    f_tap_real: ActivationStack,
    f_tap_fake: ActivationStack,
    size_average: bool = False,
) -> torch.Tensor:
    """Channel-averaged L1 distance between real and fake activation stacks.

    Literal plane-wise L1 sums by default; size_average divides each plane's
    L1 by its pixel count so values are comparable across tap geometries.
    """
    return _fm_half(g_tap_real, g_tap_fake, size_average) + _fm_half(
        f_tap_real, f_tap_fake, size_average
    )


def total_generator_loss(
    g_adv: torch.Tensor | float,
    f_adv: torch.Tensor | float,
    cyc: torch.Tensor | float,
    fm: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor | float:
    """Weighted sum of the generator-side objectives."""
    return g_adv + f_adv + weights.lambda_cyc * cyc + weights.lambda_fm * fm
