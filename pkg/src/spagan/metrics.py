"""Evaluation: kernel distance between feature sets and domain classification.

The kernel distance is the squared maximum mean discrepancy under a cubic
polynomial kernel, estimated without bias by a U-statistic over feature
vectors; reports follow the x100 +/- std x100 convention. Feature vectors
come from the penultimate pooled layer of a small convolutional domain
classifier trained on the toolkit's own data, and the extractor identity is
recorded in every report so numbers are never compared across extractors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn

from .data import DatasetPair
from .errors import ShapeError, UntrainedModelError

DOMAIN_X_LABEL = 0
DOMAIN_Y_LABEL = 1


class KidMode(str, Enum):
    TARGET_ONLY = "TARGET_ONLY"
    SOURCE_AND_TARGET = "SOURCE_AND_TARGET"


@dataclass
class FeatureSet:
    """n x d matrix of per-image feature vectors."""

    vectors: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeError(f"feature set must be 2-D (n, d), got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature set contains non-finite entries")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class KidReport:
    mean: float  # x100 scaled
    std: float  # x100 scaled
    subset_size: int
    repetitions: int
    mode: KidMode
    extractor_id: str


def poly_kernel(u: np.ndarray, v: np.ndarray) -> float:
    """Cubic polynomial kernel k(u, v) = ((u.v)/d + 1)^3."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape or u.shape[0] < 1:
        raise ShapeError(f"kernel arguments must share a dimension >= 1, got {u.shape} vs {v.shape}")
    return float((np.dot(u, v) / u.shape[0] + 1.0) ** 3)


def _gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def mmd2_unbiased(sx: FeatureSet, sy: FeatureSet) -> float:
    """U-statistic estimator of the squared MMD; may be negative."""
    if sx.n < 2 or sy.n < 2:
        raise ValueError("mmd2_unbiased needs at least 2 vectors per set")
    if sx.dim != sy.dim:
        raise ShapeError(f"feature dimensions differ: {sx.dim} vs {sy.dim}")
    x, y = sx.vectors, sy.vectors
    m, n = sx.n, sy.n
    k_xx = _gram(x, x)
    k_yy = _gram(y, y)
    k_xy = _gram(x, y)
    term_x = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_y = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    term_xy = 2.0 * k_xy.sum() / (m * n)
    return float(term_x + term_y - term_xy)


def kid(
    sx: FeatureSet,
    sy: FeatureSet,
    subset_size: int | None = None,
    reps: int = 10,
    rng: np.random.Generator | None = None,
    mode: KidMode = KidMode.TARGET_ONLY,
) -> KidReport:
    """Mean/std of the unbiased estimator over `reps` random subset pairs.

    Subsets are drawn without replacement; defaults are subset_size =
    min(100, available) and 10 repetitions. Values are x100 scaled.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if subset_size is None:
        subset_size = min(100, sx.n, sy.n)
    if subset_size > sx.n or subset_size > sy.n:
        raise ValueError(
            f"subset_size {subset_size} exceeds available vectors ({sx.n}, {sy.n})"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    values = np.empty(reps, dtype=np.float64)
    for r in range(reps):
        ix = rng.choice(sx.n, size=subset_size, replace=False)
        iy = rng.choice(sy.n, size=subset_size, replace=False)
        values[r] = mmd2_unbiased(
            FeatureSet(sx.vectors[ix], sx.extractor_id),
            FeatureSet(sy.vectors[iy], sy.extractor_id),
        )
    return KidReport(
        mean=float(values.mean() * 100.0),
        std=float(values.std() * 100.0),
        subset_size=subset_size,
        repetitions=reps,
        mode=mode,
        extractor_id=sx.extractor_id,
    )


def kid_report_for_translation(
    fake_targets: FeatureSet,
    real_targets: FeatureSet,
    real_sources: FeatureSet | None,
    mode: KidMode = KidMode.TARGET_ONLY,
    subset_size: int | None = None,
    reps: int = 10,
    rng: np.random.Generator | None = None,
) -> KidReport:
    """Translation-quality report in either evaluation mode.

    TARGET_ONLY compares fakes with real targets; SOURCE_AND_TARGET averages
    the target comparison with a fakes-vs-real-sources comparison (component
    stds propagated as their mean).
    """
    mode = KidMode(mode)
    if rng is None:
        rng = np.random.default_rng(0)
    target_report = kid(fake_targets, real_targets, subset_size, reps, rng, mode)
    if mode is KidMode.TARGET_ONLY:
        return target_report
    if real_sources is None:
        raise ValueError("SOURCE_AND_TARGET mode requires real_sources features")
    source_report = kid(fake_targets, real_sources, subset_size, reps, rng, mode)
    return KidReport(
        mean=(target_report.mean + source_report.mean) / 2.0,
        std=(target_report.std + source_report.std) / 2.0,
        subset_size=target_report.subset_size,
        repetitions=reps,
        mode=mode,
        extractor_id=fake_targets.extractor_id,
    )


class DomainClassifier(nn.Module):
    """Small convolutional two-way domain classifier / feature extractor."""

    def __init__(self, channels: int = 3, width: int = 16, feature_dim: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, feature_dim, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(feature_dim, 2)
        self.feature_dim = feature_dim
        self.trained = False
        self.extractor_id = "untrained"

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images).flatten(1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))


def train_domain_classifier(
    dataset: DatasetPair,
    steps: int = 400,
    batch_size: int = 16,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> DomainClassifier:
    """Fit the classifier on real images of both domains (X -> 0, Y -> 1)."""
    rng = torch.Generator().manual_seed(seed)
    clf = DomainClassifier()
    for m in clf.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.05, generator=rng)
                if m.bias is not None:
                    m.bias.zero_()
    images = torch.cat([dataset.domain_x, dataset.domain_y])
    labels = torch.cat(
        [
            torch.full((dataset.n_x,), DOMAIN_X_LABEL),
            torch.full((dataset.n_y,), DOMAIN_Y_LABEL),
        ]
    )
    opt = torch.optim.Adam(clf.parameters(), lr=learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(steps):
        idx = torch.randint(images.shape[0], (batch_size,), generator=rng)
        logits = clf(images[idx])
        loss = loss_fn(logits, labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    clf.eval()
    clf.trained = True
    digest = hashlib.sha256()
    for name, tensor in sorted(clf.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.numpy().tobytes())
    clf.extractor_id = f"cnn{clf.feature_dim}-{digest.hexdigest()[:8]}"
    return clf


def extract_features(images: torch.Tensor, extractor: DomainClassifier) -> FeatureSet:
    """One pooled feature vector per image; deterministic for fixed weights."""
    if not getattr(extractor, "trained", False):
        raise UntrainedModelError("feature extractor has not been trained")
    if images.dim() != 4:
        raise ShapeError(f"expected image batch (N, C, H, W), got {tuple(images.shape)}")
    with torch.no_grad():
        feats = extractor.features(images.to(torch.float32))
    return FeatureSet(feats.numpy().astype(np.float64), extractor.extractor_id)


def classifier_accuracy(
    generated: torch.Tensor, target_label: int, classifier: DomainClassifier
) -> float:
    """Fraction of generated images classified as the intended target domain."""
    if not getattr(classifier, "trained", False):
        raise UntrainedModelError("domain classifier has not been trained")
    if generated.dim() != 4 or generated.shape[0] < 1:
        raise ShapeError("classifier_accuracy needs a non-empty image batch")
    if target_label not in (DOMAIN_X_LABEL, DOMAIN_Y_LABEL):
        raise ValueError(f"target_label must be {DOMAIN_X_LABEL} or {DOMAIN_Y_LABEL}")
    with torch.no_grad():
        pred = classifier(generated.to(torch.float32)).argmax(dim=1)
    return float((pred == target_label).float().mean())
