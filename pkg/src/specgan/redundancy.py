"""Channel-correlation analysis of intermediate generator activations."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError, ValidationError
from .models import Generator, load_checkpoint

log = logging.getLogger(__name__)

DEFAULT_PROBE_SIZE = 256


@dataclass
class ActivationSample:
    layer_name: str
    activations: np.ndarray  # (B, H, W, C)

    def __post_init__(self):
        a = np.asarray(self.activations, dtype=np.float64)
        if a.ndim != 4:
            raise ShapeError(f"activations must be (B, H, W, C), got shape {a.shape}")
        if a.shape[-1] < 2:
            raise ValidationError(f"need at least 2 channels, got {a.shape[-1]}")
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"non-finite activations in layer {self.layer_name}")
        self.activations = a

    @property
    def n_channels(self) -> int:
        return self.activations.shape[-1]


@dataclass
class CorrelationMatrix:
    values: np.ndarray
    layer_name: str
    n_observations: int


def _as_generator(checkpoint) -> Generator:
    if isinstance(checkpoint, Generator):
        return checkpoint
    generator, _, _ = load_checkpoint(checkpoint)
    return generator


def analysis_layer(generator: Generator) -> str:
    """The last map before the output layer: SE-stage output if present, else the last up-block."""
    return "se_stage" if generator.se_stage is not None else f"block{len(generator.blocks)}"


def probe_batch(n_classes: int, latent_dim: int, size: int = DEFAULT_PROBE_SIZE, seed: int = 0):
    """Seeded latents with labels cycling through the classes (uniform up to rounding)."""
    if size < 1:
        raise ValidationError("probe batch size must be positive")
    z = torch.randn(size, latent_dim, generator=torch.Generator().manual_seed(seed))
    labels = torch.arange(size) % n_classes
    return z, labels


@torch.no_grad()
def capture_activations(checkpoint, layer_name: str, n: int = DEFAULT_PROBE_SIZE, seed: int = 0,
                        labels=None) -> ActivationSample:
    generator = _as_generator(checkpoint)
    available = generator.layer_names()
    if layer_name not in available:
        raise ValidationError(f"unknown layer {layer_name!r}; available layers: {', '.join(available)}")
    z, default_labels = probe_batch(generator.spec.n_classes, generator.spec.latent_dim, n, seed)
    labels = default_labels if labels is None else torch.as_tensor(labels, dtype=torch.long)
    was_training = generator.training
    generator.eval()
    captured: dict = {}
    generator(z, labels, capture=captured)
    generator.train(was_training)
    acts = captured[layer_name].permute(0, 2, 3, 1).double().numpy()
    return ActivationSample(layer_name, acts)


def channel_correlation(sample: ActivationSample) -> CorrelationMatrix:
    """Pearson correlation between channels over the flattened batch and spatial axes."""
    x = sample.activations.reshape(-1, sample.n_channels)
    n = x.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 observations per channel, got {n}")
    x = x - x.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", x, x))
    # relative threshold so rounding noise around a constant does not count as signal
    scale = np.abs(sample.activations).max() if sample.activations.size else 0.0
    constant = norms <= 1e-12 * max(scale, 1.0) * math.sqrt(n)
    if constant.any():
        log.warning("layer %s: %d constant channel(s) get zero correlation", sample.layer_name, int(constant.sum()))
    safe = np.where(constant, 1.0, norms)
    corr = (x.T @ x) / np.outer(safe, safe)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, np.where(constant, 0.0, 1.0))
    return CorrelationMatrix(corr, sample.layer_name, n)


def redundancy_score(matrix: CorrelationMatrix | np.ndarray) -> float:
    """Mean absolute off-diagonal correlation."""
    values = matrix.values if isinstance(matrix, CorrelationMatrix) else np.asarray(matrix, dtype=np.float64)
    c = values.shape[0]
    if values.ndim != 2 or values.shape[1] != c or c < 2:
        raise ShapeError(f"expected a square matrix with C >= 2, got shape {values.shape}")
    off = ~np.eye(c, dtype=bool)
    return float(np.abs(values[off]).mean())


@dataclass
class Comparison:
    proposed_layer: str
    baseline_layer: str
    proposed_score: float
    baseline_score: float
    probe_seed: int
    n_observations: int
    files: dict

    @property
    def lower(self) -> str:
        if self.proposed_score == self.baseline_score:
            return "tie"
        return "proposed" if self.proposed_score < self.baseline_score else "baseline"

    def to_dict(self) -> dict:
        return {
            "proposed_layer": self.proposed_layer,
            "baseline_layer": self.baseline_layer,
            "proposed_score": self.proposed_score,
            "baseline_score": self.baseline_score,
            "lower": self.lower,
            "probe_seed": self.probe_seed,
            "n_observations": self.n_observations,
            "files": {k: str(v) for k, v in self.files.items()},
        }


def write_matrix_csv(matrix: CorrelationMatrix, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix.values:
            writer.writerow([repr(float(v)) for v in row])
    return path


def plot_heatmap(matrix: CorrelationMatrix, path, title: str | None = None, config_hash: str | None = None) -> Path:
    from .plots import heatmap

    return heatmap(matrix.values, path, title or matrix.layer_name, config_hash)


def compare_models(proposed, baseline, layers: tuple[str, str] | None = None,
                   probe_seed: int = 0, out_dir=None, n: int = DEFAULT_PROBE_SIZE,
                   extra_metadata: dict | None = None, config_hash: str | None = None) -> Comparison:
    """Score both generators on the same probe batch; optionally write heatmaps and CSVs."""
    proposed, baseline = _as_generator(proposed), _as_generator(baseline)
    proposed_layer, baseline_layer = layers or (analysis_layer(proposed), analysis_layer(baseline))
    a = capture_activations(proposed, proposed_layer, n, probe_seed)
    b = capture_activations(baseline, baseline_layer, n, probe_seed)
    if a.activations.shape[1:] != b.activations.shape[1:]:
        raise ValidationError(
            f"layer shapes differ: {proposed_layer} {a.activations.shape[1:]} vs {baseline_layer} {b.activations.shape[1:]}"
        )
    ca, cb = channel_correlation(a), channel_correlation(b)
    files = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "proposed_csv": write_matrix_csv(ca, out / "correlation_proposed.csv"),
            "baseline_csv": write_matrix_csv(cb, out / "correlation_baseline.csv"),
            "proposed_png": plot_heatmap(ca, out / "correlation_proposed.png", f"proposed: {proposed_layer}", config_hash),
            "baseline_png": plot_heatmap(cb, out / "correlation_baseline.png", f"baseline: {baseline_layer}", config_hash),
        }
    result = Comparison(proposed_layer, baseline_layer, redundancy_score(ca), redundancy_score(cb), probe_seed,
                        ca.n_observations, files)
    if out_dir is not None:
        record = result.to_dict() | {"config_hash": config_hash} | (extra_metadata or {})
        (Path(out_dir) / "redundancy.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return result
