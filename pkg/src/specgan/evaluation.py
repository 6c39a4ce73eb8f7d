"""Downstream evaluation: ResNet-18 features for FID, macro F1 and paired k-fold CV."""

from __future__ import annotations

import hashlib
import json
import logging
from fractions import Fraction
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from sklearn.model_selection import StratifiedKFold
from torch import nn
from torch.nn import functional as F

from specgan.augment import AugmentationPolicy, augment_corpus
from specgan.dataset import AudioClip, SpectrogramCorpus
from specgan.errors import ValidationError
from specgan.fid import FidResult, compute_fid  # noqa: F401  (re-exported)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ResNet-18
# ---------------------------------------------------------------------------


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class ResNet18(nn.Module):
    """ResNet-18 for single-channel spectrograms.

    ``width`` is the channel count of the first stage (64 in the standard
    network); stages double it, so pooled features have ``8 * width`` dims.
    """

    def __init__(self, n_classes: int, width: int = 64, in_channels: int = 1):
        super().__init__()
        self.n_classes, self.width = n_classes, width
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, 2, 3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages, c_in = [], width
        for i, c_out in enumerate((width, 2 * width, 4 * width, 8 * width)):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(BasicBlock(c_in, c_out, stride), BasicBlock(c_out, c_out)))
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(c_in, n_classes)

    @property
    def feature_dim(self) -> int:
        return 8 * self.width

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled activations of the last convolutional stage."""
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x):
        return self.fc(self.features(x))


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 20
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 32
    n_folds: int = 5
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.n_folds < 2 or self.width < 1:
            raise ValidationError("classifier epochs/batch_size/width must be positive and n_folds >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ClassifierConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown classifier config keys: {sorted(unknown)}")
        return cls(**data)


def _tensor(values: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values), dtype=torch.float32)[:, None]


def train_classifier(values: np.ndarray, labels: np.ndarray, n_classes: int, config: ClassifierConfig,
                     seed: int | None = None, history: list | None = None) -> ResNet18:
    """Cross-entropy training with Adam; returns the model in eval mode."""
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    model = ResNet18(n_classes, config.width)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    x, y = _tensor(values), torch.as_tensor(labels, dtype=torch.long)
    rng = torch.Generator().manual_seed(seed)
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(len(y), generator=rng)
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            if len(idx) < 2:  # BatchNorm needs more than one sample
                continue
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if history is not None:
            history.append(total / len(y))
    model.eval()
    return model


@torch.no_grad()
def predict(model: ResNet18, values: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = _tensor(values)
    out = [model(x[i : i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


class FeatureExtractor:
    """Frozen ResNet-18 mapping spectrograms ``(N, H, W)`` to pooled features ``(N, d)``."""

    def __init__(self, model: ResNet18):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def feature_dim(self) -> int:
        return self.model.feature_dim

    @torch.no_grad()
    def __call__(self, values, batch_size: int = 256) -> np.ndarray:
        x = _tensor(values)
        feats = [self.model.features(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        out = torch.cat(feats).double().numpy() if feats else np.zeros((0, self.feature_dim))
        if not np.all(np.isfinite(out)):
            raise ValidationError("feature extractor produced non-finite features")
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "extractor.json").write_text(json.dumps({"n_classes": self.model.n_classes, "width": self.model.width}))
        save_file({k: v.contiguous() for k, v in self.model.state_dict().items()}, str(path / "weights.safetensors"))
        return path

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        path = Path(path)
        if not (path / "extractor.json").is_file():
            raise FileNotFoundError(f"no feature extractor at {path}")
        meta = json.loads((path / "extractor.json").read_text())
        model = ResNet18(meta["n_classes"], meta["width"])
        model.load_state_dict(load_file(str(path / "weights.safetensors")))
        return cls(model)


def train_feature_extractor(corpus: SpectrogramCorpus, config: ClassifierConfig = ClassifierConfig(),
                            history: list | None = None) -> FeatureExtractor:
    """Train ResNet-18 to classify the whole corpus and freeze it as a feature tap."""
    present = np.unique(corpus.labels)
    if len(corpus.classes) < 2 or present.size < 2:
        raise ValidationError("a feature extractor needs at least 2 classes")
    model = train_classifier(corpus.values, corpus.labels, len(corpus.classes), config, history=history)
    return FeatureExtractor(model)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def macro_f1(predictions: Sequence[int], truths: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support on either side scores 0."""
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truths, dtype=np.int64)
    if preds.size == 0:
        raise ValidationError("macro F1 of an empty prediction list")
    if preds.shape != truth.shape:
        raise ValidationError(f"{preds.size} predictions vs {truth.size} truths")
    if min(preds.min(), truth.min()) < 0 or max(preds.max(), truth.max()) >= n_classes:
        raise ValidationError(f"class index outside [0, {n_classes})")
    # exact rational accumulation, rounded once
    total = Fraction(0)
    for k in range(n_classes):
        tp = int(np.sum((preds == k) & (truth == k)))
        fp = int(np.sum((preds == k) & (truth != k)))
        fn = int(np.sum((preds != k) & (truth == k)))
        denom = 2 * tp + fp + fn
        if denom:
            total += Fraction(2 * tp, denom)
    return float(total / n_classes)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


class LeakageError(AssertionError):
    """An augmented or synthetic sample reached a validation split."""


def stratified_folds(labels: np.ndarray, n_folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    labels = np.asarray(labels)
    counts = np.bincount(labels)
    too_small = [k for k, n in enumerate(counts) if 0 < n < n_folds]
    if too_small:
        raise ValidationError(
            f"classes {too_small} have fewer than {n_folds} samples; every fold needs each class"
        )
    splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    return [(np.sort(tr), np.sort(va)) for tr, va in splitter.split(np.zeros(len(labels)), labels)]


def fold_signature(folds) -> str:
    h = hashlib.sha256()
    for _, va in folds:
        h.update(np.asarray(va, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


class Augmenter(Protocol):
    name: str

    def augment(self, train: SpectrogramCorpus, seed: int) -> SpectrogramCorpus:
        """Return one extra sample per training item (same per-class counts)."""


class NoAugmentation:
    name = "none"

    def augment(self, train, seed):
        return train.subset([])


@dataclass
class PolicyAugmenter:
    policy: AugmentationPolicy
    clip_lookup: Callable[[str], AudioClip] | None = None
    name: str = ""

    def __post_init__(self):
        self.name = self.name or self.policy.kind

    def augment(self, train, seed):
        return augment_corpus(train, self.policy, self.clip_lookup, seed=seed)


@dataclass
class GanAugmenter:
    checkpoint: object  # checkpoint directory or Generator
    name: str = "gan_checkpoint"

    def augment(self, train, seed):
        from specgan.training import generate_samples

        synth = generate_samples(self.checkpoint, train.per_class_counts, seed, classes=train.classes, origin=self.name)
        synth.config, synth.stats = train.config, train.stats
        return synth


def _item_keys(corpus: SpectrogramCorpus) -> set:
    return {(s, int(w)) for s, w in zip(corpus.source_ids, corpus.window_index)}


def check_no_leakage(val: SpectrogramCorpus, augmented: SpectrogramCorpus | None = None,
                     train: SpectrogramCorpus | None = None) -> None:
    if any(o != "real" for o in val.origins):
        raise LeakageError("validation split contains non-real samples")
    if augmented is None:
        return
    overlap = _item_keys(augmented) & _item_keys(val)
    if overlap:
        raise LeakageError(f"augmented samples derived from validation items: {sorted(overlap)[:5]}")
    if augmented.per_class_counts != train.per_class_counts:
        raise LeakageError(
            f"augmentation must add one sample per training item; got {augmented.per_class_counts} "
            f"for training counts {train.per_class_counts}"
        )


@dataclass
class CvReport:
    augmentation_name: str
    per_fold_f1: list
    fold_signature: str
    per_fold_train_counts: list = field(default_factory=list)
    relative_improvement: float | None = None
    fid: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold_f1))

    @property
    def std(self) -> float:
        return float(np.std(self.per_fold_f1, ddof=1)) if len(self.per_fold_f1) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "augmentation": self.augmentation_name,
            "per_fold_f1": [float(f) for f in self.per_fold_f1],
            "mean": self.mean,
            "std": self.std,
            "relative_improvement": self.relative_improvement,
            "fid": self.fid,
            "fold_signature": self.fold_signature,
            "per_fold_train_counts": self.per_fold_train_counts,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CvReport":
        return cls(
            augmentation_name=data["augmentation"],
            per_fold_f1=list(data["per_fold_f1"]),
            fold_signature=data["fold_signature"],
            per_fold_train_counts=data.get("per_fold_train_counts", []),
            relative_improvement=data.get("relative_improvement"),
            fid=data.get("fid"),
            config=data.get("config", {}),
        )


def relative_improvement(report: CvReport, baseline: CvReport) -> float:
    """Difference of mean macro F1 in percentage points."""
    if report.fold_signature != baseline.fold_signature:
        raise ValidationError("reports were computed on different folds and cannot be compared")
    return 100.0 * (report.mean - baseline.mean)


def run_cv_experiment(corpus: SpectrogramCorpus, augmenter: Augmenter | None = None,
                      config: ClassifierConfig = ClassifierConfig(), seed: int | None = None) -> CvReport:
    """Paired stratified k-fold evaluation of one augmentation strategy.

    Only the training split of each fold is augmented (one extra sample
    per item, doubling every class); the held-out fold stays real.  Fold
    assignment depends only on the labels and ``seed``, so reports from
    different strategies with the same seed are paired.
    """
    augmenter = augmenter or NoAugmentation()
    seed = config.seed if seed is None else seed
    if len(corpus) == 0:
        raise ValidationError("cannot cross-validate an empty corpus")
    folds = stratified_folds(corpus.labels, config.n_folds, seed)
    scores, train_counts = [], []
    for k, (tr, va) in enumerate(folds):
        train, val = corpus.subset(tr), corpus.subset(va)
        if augmenter.name != "none":
            extra = augmenter.augment(train, seed * 1000 + k)
            check_no_leakage(val, extra, train)
            train = train.concat(extra)
        check_no_leakage(val)
        train_counts.append(train.per_class_counts)
        model = train_classifier(train.values, train.labels, len(corpus.classes), config, seed=seed * 1000 + k)
        score = macro_f1(predict(model, val.values), val.labels, len(corpus.classes))
        logger.info("%s fold %d/%d: macro F1 %.4f", augmenter.name, k + 1, len(folds), score)
        scores.append(score)
    return CvReport(augmenter.name, scores, fold_signature(folds), train_counts,
                    config={**config.to_dict(), "seed": seed})
