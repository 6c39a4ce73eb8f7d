"""Experiment configuration: one strict JSON document driving every subcommand.

Schema (every key optional; unknown keys are rejected)::

    {
      "seed": 0,
      "output_root": "runs",
      "dataset":      {"manifest": null, "spectrogram": {<SpectrogramConfig fields>}},
      "augmentation": {"policies": [{"kind": "white_noise", "params": {...}}, ...]},
      "gan": {"generator": {<GeneratorSpec fields>}, "critic": {<CriticSpec fields>},
              "training": {<TrainingConfig fields>}, "feature_extractor": {<ClassifierConfig fields>}},
      "evaluation":   {"cv_seeds": null, "classifier": {<ClassifierConfig fields>},
                       "strategies": ["none", ...]}
    }

The top-level seed is the only seed.  It drives fold assignment,
augmentation draws, GAN initialization and probe batches, so section
level ``seed`` keys are refused.  Generator and critic class counts and
sizes default to those of the corpus they are trained on.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from specgan.augment import AugmentationPolicy
from specgan.dataset import SpectrogramConfig, sha256_of
from specgan.errors import ValidationError
from specgan.evaluation import ClassifierConfig
from specgan.models import CriticSpec, GeneratorSpec
from specgan.training import TrainingConfig

OUTPUT_ROOT_ENV = "SPECGAN_OUTPUT_ROOT"

CLASSICAL_STRATEGIES = ("white_noise", "pitch_shift", "time_stretch", "spec_augment")
GAN_STRATEGIES = ("cwgan_baseline", "proposed")
ALL_STRATEGIES = ("none", *CLASSICAL_STRATEGIES, *GAN_STRATEGIES)

_TOP_KEYS = {"seed", "output_root", "dataset", "augmentation", "gan", "evaluation"}
_SECTION_KEYS = {
    "dataset": {"manifest", "spectrogram"},
    "augmentation": {"policies"},
    "gan": {"generator", "critic", "training", "feature_extractor"},
    "evaluation": {"cv_seeds", "classifier", "strategies"},
}


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ValidationError(f"duplicate config key {key!r}")
        out[key] = value
    return out


def _check_keys(where: str, data, allowed: set) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"{where} must be an object, got {type(data).__name__}")
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}; allowed: {sorted(allowed)}")
    return data


def _as_obj(where: str, data) -> dict:
    if not isinstance(data, dict):
        raise ValidationError(f"{where} must be an object, got {type(data).__name__}")
    return data


def _no_seed(where: str, data) -> dict:
    data = _as_obj(where, data)
    if "seed" in data:
        raise ValidationError(f"{where}.seed is not allowed; set the top-level seed instead")
    return data


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_root: str = "runs"
    manifest: str | None = None
    spectrogram: SpectrogramConfig = SpectrogramConfig()
    policies: tuple = tuple(AugmentationPolicy(kind) for kind in CLASSICAL_STRATEGIES)
    generator: dict = field(default_factory=dict)  # overrides on top of corpus-derived defaults
    critic: dict = field(default_factory=dict)
    training: TrainingConfig = TrainingConfig()
    feature_extractor: ClassifierConfig = ClassifierConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    cv_seeds: tuple | None = None
    strategies: tuple = ALL_STRATEGIES

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "training", replace(self.training, seed=self.seed))
        object.__setattr__(self, "feature_extractor", replace(self.feature_extractor, seed=self.seed))
        object.__setattr__(self, "classifier", replace(self.classifier, seed=self.seed))
        object.__setattr__(self, "policies", tuple(replace(p, rng_seed=self.seed) for p in self.policies))
        unknown = set(self.strategies) - set(ALL_STRATEGIES)
        if unknown:
            raise ValidationError(f"unknown strategies {sorted(unknown)}; choose from {list(ALL_STRATEGIES)}")
        kinds = [p.kind for p in self.policies]
        if len(set(kinds)) != len(kinds):
            raise ValidationError(f"augmentation policies repeat a kind: {kinds}")
        # fail on bad model keys now rather than after preprocessing
        self.generator_spec(6, 64)
        self.critic_spec(6, 64)

    # -- resolution --------------------------------------------------------

    def generator_spec(self, n_classes: int, size: int, use_se: bool = True) -> GeneratorSpec:
        base = {"n_classes": n_classes, "output_size": size}
        spec = GeneratorSpec.from_dict({**base, **self.generator})
        return spec if use_se else replace(spec, use_se=False)

    def critic_spec(self, n_classes: int, size: int) -> CriticSpec:
        return CriticSpec.from_dict({"n_classes": n_classes, "input_size": size, **self.critic})

    def policy(self, kind: str) -> AugmentationPolicy:
        for p in self.policies:
            if p.kind == kind:
                return p
        return AugmentationPolicy(kind, rng_seed=self.seed)

    @property
    def seeds(self) -> tuple:
        return tuple(self.cv_seeds) if self.cv_seeds else (self.seed,)

    def resolved_output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_root)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        strip = lambda d: {k: v for k, v in d.items() if k != "seed"}  # noqa: E731
        return {
            "seed": self.seed,
            "output_root": self.output_root,
            "dataset": {"manifest": self.manifest, "spectrogram": self.spectrogram.to_dict()},
            "augmentation": {"policies": [{"kind": p.kind, "params": p.params} for p in self.policies]},
            "gan": {
                "generator": dict(self.generator),
                "critic": dict(self.critic),
                "training": strip(self.training.to_dict()),
                "feature_extractor": strip(self.feature_extractor.to_dict()),
            },
            "evaluation": {
                "cv_seeds": list(self.cv_seeds) if self.cv_seeds else None,
                "classifier": strip(self.classifier.to_dict()),
                "strategies": list(self.strategies),
            },
        }

    @property
    def config_hash(self) -> str:
        """Short digest of the resolved configuration, excluding the output location."""
        d = self.to_dict()
        d.pop("output_root")
        return sha256_of(d)[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = _check_keys("config", data, _TOP_KEYS)
        sections = {name: _check_keys(name, data.get(name), keys) for name, keys in _SECTION_KEYS.items()}
        ds, aug, gan, ev = (sections[k] for k in ("dataset", "augmentation", "gan", "evaluation"))
        kwargs: dict = {}
        if "seed" in data:
            kwargs["seed"] = data["seed"]
        if "output_root" in data:
            kwargs["output_root"] = str(data["output_root"])
        if ds.get("manifest") is not None:
            kwargs["manifest"] = str(ds["manifest"])
        if "spectrogram" in ds:
            kwargs["spectrogram"] = SpectrogramConfig.from_dict(_as_obj("dataset.spectrogram", ds["spectrogram"]))
        if "policies" in aug:
            policies = []
            for i, p in enumerate(aug["policies"]):
                p = _check_keys(f"augmentation.policies[{i}]", p, {"kind", "params"})
                if "kind" not in p:
                    raise ValidationError(f"augmentation.policies[{i}] needs a 'kind'")
                policies.append(AugmentationPolicy(p["kind"], dict(p.get("params") or {})))
            kwargs["policies"] = tuple(policies)
        for key in ("generator", "critic"):
            if key in gan:
                kwargs[key] = dict(_as_obj(f"gan.{key}", gan[key]))
        if "training" in gan:
            kwargs["training"] = TrainingConfig.from_dict(_no_seed("gan.training", gan["training"]))
        if "feature_extractor" in gan:
            kwargs["feature_extractor"] = ClassifierConfig.from_dict(_no_seed("gan.feature_extractor", gan["feature_extractor"]))
        if "classifier" in ev:
            kwargs["classifier"] = ClassifierConfig.from_dict(_no_seed("evaluation.classifier", ev["classifier"]))
        if ev.get("cv_seeds") is not None:
            seeds = ev["cv_seeds"]
            if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
                raise ValidationError("evaluation.cv_seeds must be a non-empty list of non-negative integers")
            kwargs["cv_seeds"] = tuple(seeds)
        if "strategies" in ev:
            kwargs["strategies"] = tuple(ev["strategies"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ValidationError(f"invalid config value: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=_reject_duplicates)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        cfg = cls.from_dict(data)
        if cfg.manifest is not None and not Path(cfg.manifest).is_absolute():
            cfg = replace(cfg, manifest=str(path.parent / cfg.manifest))
        return cfg
