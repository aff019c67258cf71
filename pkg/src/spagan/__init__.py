"""Spatial-attention unpaired image-to-image translation toolkit."""

__version__ = "0.1.0"

from .attention import (
    AttentionMap,
    AttentionMode,
    UpsampleMethod,
    apply_attention,
    attend,
    normalize_map,
    raw_attention,
    upsample_map,
)
from .data import DatasetPair, export_dataset, load_unpaired_dataset, next_batch, synth_shapes
from .losses import (
    LossRecord,
    LossWeights,
    cycle_loss,
    feature_map_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    total_generator_loss,
)
from .metrics import (
    DomainClassifier,
    FeatureSet,
    KidMode,
    KidReport,
    classifier_accuracy,
    extract_features,
    kid,
    kid_report_for_translation,
    mmd2_unbiased,
    poly_kernel,
    train_domain_classifier,
)
from .networks import (
    ActivationStack,
    DiscriminatorSpec,
    GeneratorSpec,
    ModelSet,
    build_discriminator,
    build_generator,
    build_model_set,
    discriminator_forward,
    generator_forward,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    PRESET_NAMES,
    StepArtifacts,
    TrainConfig,
    ablation_preset,
    fit,
    train_step,
    translate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
