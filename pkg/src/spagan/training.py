"""Training engine: attention-conditioned steps, ablation presets, fit loop.

One step runs, in order: attention on the real inputs, generator forwards
with feature taps, un-attended cycle passes, attended feature-loss passes,
a joint Adam update of both generators (discriminators frozen, maps
gradient-stopped), then one Adam update per discriminator.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields

import torch

from . import attention as att
from .data import DatasetPair, next_batch
from .errors import ConfigError, DivergenceError, TapError
from .losses import (
    LossRecord,
    LossWeights,
    cycle_loss,
    feature_map_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    write_loss_csv_header,
)
from .networks import (
    GENERATOR_TAPS,
    DiscriminatorSpec,
    GeneratorSpec,
    ModelSet,
    build_model_set,
    generator_forward,
    load_checkpoint,
    save_checkpoint,
)

THREADS_ENV_VAR = "SPAGAN_NUM_THREADS"


@dataclass(frozen=True)
class TrainConfig:
    # mechanism toggles (the ablation axes)
    attention_enabled: bool = True
    attention_mode: str = "SUM"  # SUM | MAX
    fm_loss_enabled: bool = True
    fm_tap_layer: str = "DEC1"  # ENC1 | DEC1 | DEC4
    # loss weights
    lambda_cyc: float = 10.0
    lambda_fm: float = 1.0
    # optimizer
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lr_linear_decay: bool = False
    # run control
    total_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    attention_dump_every: int = 500
    deterministic: bool = True
    # model geometry
    image_size: int = 64
    base_width: int = 32
    residual_blocks: int = 0  # 0 = auto: 9 at image_size >= 256, else 6
    disc_base_width: int = 32
    disc_layers: int = 3
    # variant flags
    upsample_method: str = "NEAREST"  # NEAREST | BILINEAR
    fm_size_average: bool = False
    attend_cycle: bool = False  # re-attend intermediates on the cycle path
    image_pool: bool = False  # replay pool for discriminator updates
    pool_size: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.attention_mode not in ("SUM", "MAX"):
            raise ConfigError(f"attention_mode must be SUM or MAX, got '{self.attention_mode}'")
        if self.fm_loss_enabled and self.fm_tap_layer not in GENERATOR_TAPS:
            raise ConfigError(f"fm_tap_layer must be one of {GENERATOR_TAPS}, got '{self.fm_tap_layer}'")
        if self.upsample_method not in ("NEAREST", "BILINEAR"):
            raise ConfigError(f"upsample_method must be NEAREST or BILINEAR, got '{self.upsample_method}'")
        for name in ("lambda_cyc", "lambda_fm"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cyc, self.lambda_fm)

    def generator_spec(self) -> GeneratorSpec:
        blocks = self.residual_blocks
        if blocks <= 0:
            blocks = 9 if self.image_size >= 256 else 6
        return GeneratorSpec(
            base_width=self.base_width,
            residual_blocks=blocks,
            image_size=self.image_size,
            tap_layer=self.fm_tap_layer if self.fm_loss_enabled else "DEC1",
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            base_width=self.disc_base_width,
            layer_count=self.disc_layers,
            image_size=self.image_size,
        )


# Ablation presets, in the canonical comparison-table order. "SPA-GAN-Lfm-D1"
# is the flagship configuration (sum attention, feature loss at the first
# decoder layer).
_PRESET_FIELDS = {
    "CycleGAN": dict(attention_enabled=False, fm_loss_enabled=False),
    "SPA-GAN-wo-AD": dict(attention_enabled=False, fm_loss_enabled=True, fm_tap_layer="DEC1"),
    "SPA-GAN-wo-Lfm": dict(attention_enabled=True, attention_mode="SUM", fm_loss_enabled=False),
    "SPA-GAN-Lfm-E1": dict(attention_enabled=True, attention_mode="SUM", fm_loss_enabled=True, fm_tap_layer="ENC1"),
    "SPA-GAN-Lfm-D4": dict(attention_enabled=True, attention_mode="SUM", fm_loss_enabled=True, fm_tap_layer="DEC4"),
    "SPA-GAN-Amax": dict(attention_enabled=True, attention_mode="MAX", fm_loss_enabled=True, fm_tap_layer="DEC1"),
    "SPA-GAN-Lfm-D1": dict(attention_enabled=True, attention_mode="SUM", fm_loss_enabled=True, fm_tap_layer="DEC1"),
}

PRESET_NAMES = tuple(_PRESET_FIELDS)


def _normalize_preset(name: str) -> str:
    return name.lower().replace("_", "-").replace(" ", "-")


_PRESET_LOOKUP = {_normalize_preset(k): k for k in _PRESET_FIELDS}
# accepted spellings seen in configs and papers' table notation
_PRESET_LOOKUP.update(
    {
        "spa-gan": "SPA-GAN-Lfm-D1",
        "spagan": "SPA-GAN-Lfm-D1",
        "spa-gan-wo-a-d": "SPA-GAN-wo-AD",
        "spa-gan-wo-l-fm": "SPA-GAN-wo-Lfm",
        "spa-gan-a-max": "SPA-GAN-Amax",
    }
)


def ablation_preset(name: str, **overrides) -> TrainConfig:
    """Build the TrainConfig for one named ablation row.

    Accepts the canonical names in PRESET_NAMES (case-insensitive; '_' and
    spaces treated as '-'). Extra keyword arguments override any TrainConfig
    field.
    """
    key = _PRESET_LOOKUP.get(_normalize_preset(name))
    if key is None:
        raise ConfigError(f"unknown preset '{name}'; valid presets: {', '.join(PRESET_NAMES)}")
    return TrainConfig(**{**_PRESET_FIELDS[key], **overrides})


@dataclass
class StepArtifacts:
    """Tensors produced by one training step, for logging and inspection."""

    fake_y: torch.Tensor
    fake_x: torch.Tensor
    rec_x: torch.Tensor
    rec_y: torch.Tensor
    map_x: att.AttentionMap
    map_y: att.AttentionMap
    map_fake_x: att.AttentionMap
    map_fake_y: att.AttentionMap
    record: LossRecord


class ImagePool:
    """Replay pool of generated images for discriminator updates."""

    def __init__(self, size: int, rng: torch.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, image: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return image
        if len(self.images) < self.size:
            self.images.append(image.detach().clone())
            return image
        if int(torch.randint(2, (1,), generator=self.rng)):
            idx = int(torch.randint(self.size, (1,), generator=self.rng))
            out = self.images[idx]
            self.images[idx] = image.detach().clone()
            return out
        return image


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _scalar(t: torch.Tensor) -> float:
    return float(t.detach())


def _check_finite(step: int, **named) -> None:
    for name, value in named.items():
        if not math.isfinite(value):
            raise DivergenceError(name, step, value)


def _tensors_finite(step: int, **named) -> None:
    for name, tensor in named.items():
        if not torch.isfinite(tensor).all():
            raise DivergenceError(name, step, float("nan"))


def train_step(
    models: ModelSet,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: TrainConfig,
    pools: tuple[ImagePool, ImagePool] | None = None,
) -> tuple[ModelSet, StepArtifacts]:
    """Run one full optimization step on a single (x, y) pair.

    Returns the (mutated) ModelSet and the step's artifacts. Raises
    DivergenceError if any loss goes non-finite; weights are then untouched
    by the failing update.
    """
    G, F, D_X, D_Y = models.G, models.F, models.D_X, models.D_Y
    step = models.step + 1
    mode = att.AttentionMode(cfg.attention_mode)
    method = att.UpsampleMethod(cfg.upsample_method)

    def ones(img: torch.Tensor) -> att.AttentionMap:
        return att.identity_map(img.shape[0], img.shape[2], img.shape[3], img.dtype)

    # (1) attention on the real inputs
    if cfg.attention_enabled:
        x_a, map_x = att.attend(D_X, x, mode, method)
        y_a, map_y = att.attend(D_Y, y, mode, method)
        for m in (map_x, map_y):
            assert float(m.values.amin()) >= 0.0 and float(m.values.amax()) <= 1.0
            # nearest upsampling preserves the normalized maximum exactly
            assert method is not att.UpsampleMethod.NEAREST or float(m.values.amax()) == 1.0
    else:
        x_a, map_x = x, ones(x)
        y_a, map_y = y, ones(y)

    # (2) translation passes, tapping the feature-loss layer
    want_tap = cfg.fm_tap_layer if cfg.fm_loss_enabled else None
    _set_requires_grad((D_X, D_Y), False)
    fake_y, g_tap_real = generator_forward(G, x_a, want_tap)
    fake_x, f_tap_real = generator_forward(F, y_a, want_tap)

    # (3) cycle passes; intermediates are not re-attended by default
    if cfg.attend_cycle and cfg.attention_enabled:
        cyc_in_y, _ = att.attend(D_Y, fake_y, mode, method)
        cyc_in_x, _ = att.attend(D_X, fake_x, mode, method)
    else:
        cyc_in_y, cyc_in_x = fake_y, fake_x
    rec_x, _ = generator_forward(F, cyc_in_y)
    rec_y, _ = generator_forward(G, cyc_in_x)

    # (4) feature-loss passes on the attended fakes
    map_fake_x, map_fake_y = ones(x), ones(y)
    fm = x.new_zeros(())
    if cfg.fm_loss_enabled:
        if cfg.attention_enabled:
            y_prime_a, map_fake_x = att.attend(D_X, fake_x, mode, method)
            x_prime_a, map_fake_y = att.attend(D_Y, fake_y, mode, method)
        else:
            y_prime_a, x_prime_a = fake_x, fake_y
        _, g_tap_fake = generator_forward(G, y_prime_a, cfg.fm_tap_layer)
        _, f_tap_fake = generator_forward(F, x_prime_a, cfg.fm_tap_layer)
        fm = feature_map_loss(g_tap_real, g_tap_fake, f_tap_real, f_tap_fake, cfg.fm_size_average)

    # (5) joint generator update; discriminators frozen, maps detached
    g_adv = lsgan_g_loss(D_Y(fake_y)[0])
    f_adv = lsgan_g_loss(D_X(fake_x)[0])
    cyc = cycle_loss(rec_x, x_a, rec_y, y_a)
    if cfg.fm_loss_enabled:
        total = g_adv + f_adv + cfg.lambda_cyc * cyc + cfg.lambda_fm * fm
    else:
        total = g_adv + f_adv + cfg.lambda_cyc * cyc
    _check_finite(step, gAdvLoss=float(g_adv), fAdvLoss=float(f_adv), cycLoss=float(cyc), fmLoss=float(fm))
    models.opt_G.zero_grad(set_to_none=True)
    total.backward()
    models.opt_G.step()
    _set_requires_grad((D_X, D_Y), True)

    # (6) discriminator updates on the pre-update fakes, detached
    d_fake_y = pools[1].query(fake_y.detach()) if pools else fake_y.detach()
    d_loss_y = lsgan_d_loss(D_Y(y)[0], D_Y(d_fake_y)[0])
    _check_finite(step, dLossY=float(d_loss_y))
    models.opt_DY.zero_grad(set_to_none=True)
    d_loss_y.backward()
    models.opt_DY.step()

    d_fake_x = pools[0].query(fake_x.detach()) if pools else fake_x.detach()
    d_loss_x = lsgan_d_loss(D_X(x)[0], D_X(d_fake_x)[0])
    _check_finite(step, dLossX=float(d_loss_x))
    models.opt_DX.zero_grad(set_to_none=True)
    d_loss_x.backward()
    models.opt_DX.step()

    # (7) bookkeeping
    models.step = step
    record = LossRecord.from_components(
        step=step,
        d_loss_x=float(d_loss_x),
        d_loss_y=float(d_loss_y),
        g_adv_loss=float(g_adv),
        f_adv_loss=float(f_adv),
        cyc_loss=float(cyc),
        fm_loss=float(fm),
        weights=cfg.weights,
    )
    artifacts = StepArtifacts(
        fake_y=fake_y.detach(),
        fake_x=fake_x.detach(),
        rec_x=rec_x.detach(),
        rec_y=rec_y.detach(),
        map_x=map_x,
        map_y=map_y,
        map_fake_x=map_fake_x,
        map_fake_y=map_fake_y,
        record=record,
    )
    return models, artifacts


def apply_thread_limits(deterministic: bool) -> None:
    """Honor the SPAGAN_NUM_THREADS cap; deterministic mode forces one thread."""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            limit = max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got '{env}'")
        torch.set_num_threads(min(torch.get_num_threads(), limit))


def _dump_attention(out_dir: str, step: int, x, y, artifacts: StepArtifacts) -> None:
    os.makedirs(out_dir, exist_ok=True)

    def name(direction, kind):
        return os.path.join(out_dir, f"{step:06d}_{direction}_{kind}_attn.png")

    att.save_heatmap_png(artifacts.map_x, name("X2Y", "real"), image=x)
    att.save_heatmap_png(artifacts.map_fake_y, name("X2Y", "fake"), image=artifacts.fake_y)
    att.save_heatmap_png(artifacts.map_y, name("Y2X", "real"), image=y)
    att.save_heatmap_png(artifacts.map_fake_x, name("Y2X", "fake"), image=artifacts.fake_x)


def config_to_meta(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def fit(cfg: TrainConfig, dataset: DatasetPair, out_dir: str | os.PathLike) -> str:
    """Train for cfg.total_steps on the dataset; return the final checkpoint path.

    Writes out_dir/losses.csv (one row per step), periodic checkpoints and
    attention heatmap panels. Deterministic for a fixed config and dataset.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if dataset.image_size != cfg.image_size:
        raise ConfigError(
            f"dataset image size {dataset.image_size} != config image_size {cfg.image_size}"
        )
    apply_thread_limits(cfg.deterministic)

    init_rng = torch.Generator().manual_seed(cfg.seed)
    data_rng = torch.Generator().manual_seed(cfg.seed + 1)
    pools = None
    if cfg.image_pool:
        pool_rng = torch.Generator().manual_seed(cfg.seed + 2)
        pools = (ImagePool(cfg.pool_size, pool_rng), ImagePool(cfg.pool_size, pool_rng))

    models = build_model_set(
        cfg.generator_spec(),
        cfg.discriminator_spec(),
        init_rng,
        learning_rate=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )

    meta = config_to_meta(cfg)
    csv_path = os.path.join(out_dir, "losses.csv")
    last_ckpt = None
    with open(csv_path, "w", newline="") as fh:
        writer = write_loss_csv_header(fh)
        for step in range(1, cfg.total_steps + 1):
            if cfg.lr_linear_decay:
                lr = cfg.learning_rate * (1.0 - (step - 1) / cfg.total_steps)
                for opt in (models.opt_G, models.opt_DX, models.opt_DY):
                    for group in opt.param_groups:
                        group["lr"] = lr
            x, y = next_batch(dataset, data_rng)
            try:
                models, artifacts = train_step(models, x, y, cfg, pools)
            except DivergenceError:
                fh.flush()
                raise  # last good checkpoint stays on disk
            writer.writerow(artifacts.record.csv_row())
            fh.flush()
            if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
                last_ckpt = save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{step:06d}.pt"), models, meta
                )
            if cfg.attention_dump_every > 0 and step % cfg.attention_dump_every == 0:
                _dump_attention(os.path.join(out_dir, "attention"), step, x, y, artifacts)
    if models.step % max(cfg.checkpoint_every, 1) != 0 or cfg.checkpoint_every <= 0:
        last_ckpt = save_checkpoint(
            os.path.join(out_dir, f"ckpt_{models.step:06d}.pt"), models, meta
        )
    assert last_ckpt is not None
    return last_ckpt


def translate(
    checkpoint: str | os.PathLike,
    images: torch.Tensor,
    direction: str = "X2Y",
    emit_attention: bool = False,
):
    """Translate an image batch with a trained checkpoint.

    X2Y runs G on (attended) X-domain images, Y2X runs F on Y-domain images.
    Attention follows the checkpoint's training config: identity when it was
    trained without attention. Returns the translated batch, plus the list of
    per-image AttentionMaps when emit_attention is set.
    """
    if direction not in ("X2Y", "Y2X"):
        raise ConfigError(f"direction must be X2Y or Y2X, got '{direction}'")
    models, meta = load_checkpoint(checkpoint)
    gen = models.G if direction == "X2Y" else models.F
    disc = models.D_X if direction == "X2Y" else models.D_Y
    use_attention = bool(meta.get("attention_enabled", False))
    mode = att.AttentionMode(meta.get("attention_mode", "SUM"))
    method = att.UpsampleMethod(meta.get("upsample_method", "NEAREST"))

    outputs = []
    maps = []
    with torch.no_grad():
        for i in range(images.shape[0]):
            img = images[i : i + 1].to(torch.float32)
            if use_attention:
                attended, amap = att.attend(disc, img, mode, method)
            else:
                attended, amap = img, att.identity_map(1, img.shape[2], img.shape[3], img.dtype)
            out, _ = generator_forward(gen, attended)
            outputs.append(out)
            maps.append(amap)
    translated = torch.cat(outputs, dim=0)
    if emit_attention:
        return translated, maps
    return translated


# --- flat key=value config files -------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key '{key}' expects a boolean, got '{raw}'")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key '{key}' expects an integer, got '{raw}'")
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key '{key}' expects a number, got '{raw}'")
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat `key = value` lines; unknown keys are an error, never ignored."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{stripped}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}' (line {lineno})")
        if key in values:
            raise ConfigError(f"duplicate config key '{key}' (line {lineno})")
        values[key] = _parse_value(key, raw)
    return values


def load_config_file(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    with open(os.fspath(path)) as fh:
        values = parse_config_text(fh.read())
    base_values = dataclasses.asdict(base) if base is not None else {}
    return TrainConfig(**{**base_values, **values})
