"""Generator / discriminator architectures with named activation taps.

The generator is the classic residual encoder-decoder: a 7x7 stride-1 input
conv, two stride-2 downsampling convs, N residual blocks, two stride-2
transposed-conv upsamplers and a 7x7 output conv, instance-normalized
throughout with a tanh output. The discriminator is a patch classifier:
stride-2 4x4 convs doubling width, one wide stride-1 conv, then a stride-1
conv to a 1-channel patch logit map.

Taps expose intermediate activation stacks without perturbing the forward
pass: ENC1 (first encoder block output), DEC1 (first upsampler block output),
DEC4 (output conv result, pre-tanh) on generators, and SECOND_TO_LAST (the
wide stride-1 block output) on discriminators.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ShapeError, SpecError, TapError

GENERATOR_TAPS = ("ENC1", "DEC1", "DEC4")
DISCRIMINATOR_TAP = "SECOND_TO_LAST"

CHECKPOINT_VERSION = 1

INIT_STD = 0.02


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 64
    residual_blocks: int = 6
    image_size: int = 128
    channels: int = 3
    tap_layer: str = "DEC1"  # default tap used by feature-map losses

    def __post_init__(self):
        if self.base_width < 4:
            raise SpecError("generator base_width must be >= 4")
        if self.residual_blocks < 1:
            raise SpecError("residual_blocks must be >= 1")
        if self.image_size % 4 != 0:
            raise SpecError("image_size must be divisible by 4 (two stride-2 stages)")
        if self.tap_layer not in GENERATOR_TAPS:
            raise SpecError(f"unknown tap_layer '{self.tap_layer}', expected one of {GENERATOR_TAPS}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_width: int = 64
    layer_count: int = 3
    image_size: int = 128
    channels: int = 3

    def __post_init__(self):
        if self.base_width < 4:
            raise SpecError("discriminator base_width must be >= 4")
        if self.layer_count < 2:
            raise SpecError("layer_count must be >= 2")
        # 4x4 convs, padding 1: stride-2 halves, each stride-1 loses one pixel.
        size = self.image_size
        for _ in range(self.layer_count):
            size = (size + 2 - 4) // 2 + 1
            if size < 1:
                raise SpecError(f"image_size {self.image_size} collapses below 1x1 in the discriminator")
        if size - 2 < 1:  # two stride-1 layers remain
            raise SpecError(f"image_size {self.image_size} collapses below 1x1 in the discriminator")


def default_residual_blocks(image_size: int) -> int:
    return 9 if image_size >= 256 else 6


@dataclass
class ActivationStack:
    """C feature planes tapped from a named layer; shape (B, C, H', W')."""

    planes: torch.Tensor
    layer_name: str

    def __post_init__(self):
        if self.planes.dim() != 4 or self.planes.shape[1] < 1:
            raise ShapeError(f"activation stack must be (B, C, H, W), got {tuple(self.planes.shape)}")


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.enc1 = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.channels, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * w) for _ in range(spec.residual_blocks)])
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.out_conv = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, spec.channels, 7),
        )

    def forward(self, x: torch.Tensor, want_tap: str | None = None):
        """Translate x; optionally also return the named activation stack."""
        if want_tap is not None and want_tap not in GENERATOR_TAPS:
            raise TapError(f"unknown generator tap '{want_tap}', expected one of {GENERATOR_TAPS}")
        _check_image(x, self.spec.channels, self.spec.image_size)
        taps: dict[str, torch.Tensor] = {}
        h = self.enc1(x)
        taps["ENC1"] = h
        h = self.down2(self.down1(h))
        h = self.blocks(h)
        h = self.up1(h)
        taps["DEC1"] = h
        h = self.up2(h)
        pre = self.out_conv(h)
        taps["DEC4"] = pre
        out = torch.tanh(pre)
        if want_tap is None:
            return out, None
        return out, ActivationStack(taps[want_tap], want_tap)


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = [
            nn.Conv2d(spec.channels, spec.base_width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        width = spec.base_width
        for _ in range(spec.layer_count - 1):
            layers += [
                nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
                nn.InstanceNorm2d(2 * width),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            width *= 2
        self.features = nn.Sequential(*layers)
        self.penultimate = nn.Sequential(
            nn.Conv2d(width, 2 * width, 4, stride=1, padding=1),
            nn.InstanceNorm2d(2 * width),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Conv2d(2 * width, 1, 4, stride=1, padding=1)
        self.tap_channels = 2 * width
        s = spec.image_size
        for _ in range(spec.layer_count):
            s = (s + 2 - 4) // 2 + 1
        self.tap_spatial = s - 1
        self.logit_spatial = s - 2

    def forward(self, img: torch.Tensor):
        """Return (patch logit map, SECOND_TO_LAST activation stack)."""
        _check_image(img, self.spec.channels, self.spec.image_size)
        h = self.features(img)
        tap = self.penultimate(h)
        logits = self.head(tap)
        return logits, ActivationStack(tap, DISCRIMINATOR_TAP)


def _check_image(x: torch.Tensor, channels: int, image_size: int) -> None:
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != image_size or x.shape[3] != image_size:
        raise ShapeError(
            f"expected image batch of shape (B, {channels}, {image_size}, {image_size}), got {tuple(x.shape)}"
        )


def _init_weights(module: nn.Module, rng: torch.Generator) -> None:
    # Zero-mean Gaussian, std 0.02; deterministic in module definition order.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=rng)
                if m.bias is not None:
                    m.bias.zero_()


def build_generator(
    spec: GeneratorSpec, rng: torch.Generator, dtype: torch.dtype = torch.float32
) -> ResnetGenerator:
    gen = ResnetGenerator(spec)
    _init_weights(gen, rng)
    return gen.to(dtype)


def build_discriminator(
    spec: DiscriminatorSpec, rng: torch.Generator, dtype: torch.dtype = torch.float32
) -> PatchDiscriminator:
    disc = PatchDiscriminator(spec)
    _init_weights(disc, rng)
    return disc.to(dtype)


def generator_forward(
    gen: ResnetGenerator, x: torch.Tensor, want_tap: str | None = None
) -> tuple[torch.Tensor, ActivationStack | None]:
    return gen(x, want_tap=want_tap)


def discriminator_forward(
    disc: PatchDiscriminator, img: torch.Tensor
) -> tuple[torch.Tensor, ActivationStack]:
    return disc(img)


@dataclass
class ModelSet:
    """The four networks plus optimizer state and the global step counter."""

    G: ResnetGenerator
    F: ResnetGenerator
    D_X: PatchDiscriminator
    D_Y: PatchDiscriminator
    opt_G: torch.optim.Adam
    opt_DX: torch.optim.Adam
    opt_DY: torch.optim.Adam
    step: int = 0
    gen_spec: GeneratorSpec = field(default=None)  # type: ignore[assignment]
    disc_spec: DiscriminatorSpec = field(default=None)  # type: ignore[assignment]


def build_model_set(
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    rng: torch.Generator,
    learning_rate: float = 2e-4,
    betas: tuple[float, float] = (0.5, 0.999),
    dtype: torch.dtype = torch.float32,
) -> ModelSet:
    g = build_generator(gen_spec, rng, dtype)
    f = build_generator(gen_spec, rng, dtype)
    d_x = build_discriminator(disc_spec, rng, dtype)
    d_y = build_discriminator(disc_spec, rng, dtype)
    opt_g = torch.optim.Adam(
        list(g.parameters()) + list(f.parameters()), lr=learning_rate, betas=betas
    )
    opt_dx = torch.optim.Adam(d_x.parameters(), lr=learning_rate, betas=betas)
    opt_dy = torch.optim.Adam(d_y.parameters(), lr=learning_rate, betas=betas)
    return ModelSet(g, f, d_x, d_y, opt_g, opt_dx, opt_dy, step=0, gen_spec=gen_spec, disc_spec=disc_spec)


def _state_f32(module: nn.Module) -> dict:
    return {k: v.detach().to(torch.float32).clone() for k, v in module.state_dict().items()}


def _optim_state_f32(opt: torch.optim.Optimizer) -> dict:
    state = opt.state_dict()

    def cast(v):
        if isinstance(v, torch.Tensor) and v.is_floating_point():
            return v.detach().to(torch.float32).clone()
        if isinstance(v, dict):
            return {k: cast(u) for k, u in v.items()}
        if isinstance(v, list):
            return [cast(u) for u in v]
        return v

    return cast(state)


def save_checkpoint(
    path: str | os.PathLike, models: ModelSet, meta: dict | None = None
) -> str:
    """Write a versioned checkpoint (all weights as 32-bit floats) atomically."""
    path = os.fspath(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "generator_spec": asdict(models.gen_spec),
        "discriminator_spec": asdict(models.disc_spec),
        "state": {
            "G": _state_f32(models.G),
            "F": _state_f32(models.F),
            "D_X": _state_f32(models.D_X),
            "D_Y": _state_f32(models.D_Y),
        },
        "optim": {
            "G": _optim_state_f32(models.opt_G),
            "D_X": _optim_state_f32(models.opt_DX),
            "D_Y": _optim_state_f32(models.opt_DY),
        },
        "step": models.step,
        "meta": dict(meta or {}),
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        torch.save(payload, fh)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelSet, dict]:
    """Rebuild a ModelSet from a checkpoint; forward results are bit-identical."""
    path = os.fspath(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SpecError(f"unsupported checkpoint version {payload.get('version')!r}")
    gen_spec = GeneratorSpec(**payload["generator_spec"])
    disc_spec = DiscriminatorSpec(**payload["discriminator_spec"])
    meta = payload.get("meta", {})
    lr = float(meta.get("learning_rate", 2e-4))
    betas = (float(meta.get("adam_beta1", 0.5)), float(meta.get("adam_beta2", 0.999)))
    rng = torch.Generator().manual_seed(0)  # overwritten below
    models = build_model_set(gen_spec, disc_spec, rng, learning_rate=lr, betas=betas)
    models.G.load_state_dict(payload["state"]["G"])
    models.F.load_state_dict(payload["state"]["F"])
    models.D_X.load_state_dict(payload["state"]["D_X"])
    models.D_Y.load_state_dict(payload["state"]["D_Y"])
    models.opt_G.load_state_dict(payload["optim"]["G"])
    models.opt_DX.load_state_dict(payload["optim"]["D_X"])
    models.opt_DY.load_state_dict(payload["optim"]["D_Y"])
    models.step = int(payload["step"])
    return models, meta
