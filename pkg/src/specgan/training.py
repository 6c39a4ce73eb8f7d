"""Conditional WGAN-GP training with FID-based checkpoint selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from specgan.dataset import SpectrogramCorpus
from specgan.errors import NumericalError, ShapeError, ValidationError
from specgan.fid import compute_fid
from specgan.models import Critic, CriticSpec, Generator, GeneratorSpec, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

TRAINER_STATE_FILE = "trainer_state.pt"


@dataclass(frozen=True)
class TrainingConfig:
    gp_weight: float = 10.0
    learning_rate: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    critic_steps_per_generator_step: int = 5
    batch_size: int = 64
    max_epochs: int = 500
    fid_eval_interval: int = 5
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.gp_weight < 0:
            raise ValidationError("gp_weight must be >= 0")
        if self.critic_steps_per_generator_step < 1:
            raise ValidationError("critic_steps_per_generator_step must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if self.max_epochs < 1 or self.fid_eval_interval < 1 or self.patience < 1:
            raise ValidationError("max_epochs, fid_eval_interval and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown TrainingConfig keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Gradient penalty and single steps
# ---------------------------------------------------------------------------


def gradient_penalty(
    critic: Callable,
    real: torch.Tensor,
    fake: torch.Tensor,
    labels,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean of ``(||grad critic(x_hat)|| - 1)^2`` over random interpolates.

    ``x_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per
    sample.  The result keeps its graph so it can be backpropagated.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ in shape")
    if real.shape[0] < 1:
        raise ValidationError("gradient penalty needs a non-empty batch")
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    eps = eps.reshape((-1,) + (1,) * (real.ndim - 1)).to(real.dtype)
    x_hat = (eps * real + (1 - eps) * fake).detach().requires_grad_(True)
    scores = critic(x_hat, labels)
    (grads,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


@dataclass
class GanState:
    generator: nn.Module
    critic: nn.Module
    opt_g: torch.optim.Optimizer
    opt_c: torch.optim.Optimizer
    rng: torch.Generator
    latent_dim: int
    critic_updates: int = 0
    generator_updates: int = 0
    last: dict = field(default_factory=dict)


def init_state(generator: nn.Module, critic: nn.Module, config: TrainingConfig) -> GanState:
    betas = (config.adam_beta1, config.adam_beta2)
    latent_dim = generator.spec.latent_dim if hasattr(generator, "spec") else generator.latent_dim
    rng = torch.Generator().manual_seed(config.seed)
    return GanState(
        generator=generator,
        critic=critic,
        opt_g=torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas),
        opt_c=torch.optim.Adam(critic.parameters(), lr=config.learning_rate, betas=betas),
        rng=rng,
        latent_dim=latent_dim,
    )


def _grad_norm(module: nn.Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _check_finite(state: GanState, **losses):
    if all(math.isfinite(v) for v in losses.values()):
        return
    raise NumericalError(
        f"non-finite loss after {state.critic_updates} critic / {state.generator_updates} generator updates",
        {
            "losses": losses,
            "previous": dict(state.last),
            "critic_grad_norm": _grad_norm(state.critic),
            "generator_grad_norm": _grad_norm(state.generator),
        },
    )


def critic_step(state: GanState, real: torch.Tensor, labels: torch.Tensor, config: TrainingConfig) -> dict:
    """One critic update: ``mean(C(fake)) - mean(C(real)) + gp_weight * GP``."""
    z = torch.randn(real.shape[0], state.latent_dim, generator=state.rng)
    with torch.no_grad():
        fake = state.generator(z, labels)
    real_score = state.critic(real, labels).mean()
    fake_score = state.critic(fake, labels).mean()
    gp = gradient_penalty(state.critic, real, fake, labels, generator=state.rng) if config.gp_weight else real_score * 0
    loss = fake_score - real_score + config.gp_weight * gp
    state.opt_c.zero_grad(set_to_none=True)
    loss.backward()
    _check_finite(state, critic_loss=loss.item())
    state.opt_c.step()
    state.critic_updates += 1
    return {"critic_loss": loss.item(), "gp": gp.item(), "wasserstein": (real_score - fake_score).item()}


def generator_step(state: GanState, labels: torch.Tensor) -> dict:
    z = torch.randn(labels.shape[0], state.latent_dim, generator=state.rng)
    for p in state.critic.parameters():
        p.requires_grad_(False)
    try:
        loss = -state.critic(state.generator(z, labels), labels).mean()
        state.opt_g.zero_grad(set_to_none=True)
        loss.backward()
    finally:
        for p in state.critic.parameters():
            p.requires_grad_(True)
    _check_finite(state, gen_loss=loss.item())
    state.opt_g.step()
    state.generator_updates += 1
    return {"gen_loss": loss.item()}


def train_step(state: GanState, real: torch.Tensor, labels, config: TrainingConfig) -> dict:
    """``critic_steps_per_generator_step`` critic updates on ``real``, then one generator update."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    critic_losses = [critic_step(state, real, labels, config) for _ in range(config.critic_steps_per_generator_step)]
    result = {
        "critic_loss": float(np.mean([c["critic_loss"] for c in critic_losses])),
        "gp": float(np.mean([c["gp"] for c in critic_losses])),
        **generator_step(state, labels),
    }
    state.last = result
    return result


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------


def _latents_and_labels(counts: Sequence[int], latent_dim: int, seed: int):
    labels = torch.cat([torch.full((n,), i, dtype=torch.long) for i, n in enumerate(counts)])
    z = torch.randn(int(labels.numel()), latent_dim, generator=torch.Generator().manual_seed(seed))
    return z, labels


@torch.no_grad()
def sample_generator(generator: Generator, counts: Sequence[int], seed: int, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """``(values (N, H, W), labels)`` with ``counts[i]`` samples of class ``i``, in class order."""
    z, labels = _latents_and_labels(counts, generator.spec.latent_dim, seed)
    was_training = generator.training
    generator.eval()
    chunks = [generator(z[i : i + batch_size], labels[i : i + batch_size]) for i in range(0, len(z), batch_size)]
    generator.train(was_training)
    size = generator.spec.output_size
    values = torch.cat(chunks)[:, 0].double().numpy() if chunks else np.zeros((0, size, size))
    return values, labels.numpy()


def generate_samples(checkpoint, class_counts: dict, seed: int, classes: Sequence[str] | None = None,
                     origin: str = "synthetic") -> SpectrogramCorpus:
    """Draw a labeled, normalized synthetic corpus from a generator checkpoint.

    ``checkpoint`` is a checkpoint directory or a ``Generator``.  Class
    names resolve against ``classes`` or, failing that, the class list
    stored with the checkpoint.
    """
    if isinstance(checkpoint, Generator):
        generator, extra = checkpoint, {}
    else:
        generator, _, extra = load_checkpoint(checkpoint)
    classes = list(classes or extra.get("classes") or [str(i) for i in range(generator.spec.n_classes)])
    unknown = set(class_counts) - set(classes)
    if unknown:
        raise ValidationError(f"unknown classes {sorted(unknown)}; generator knows {classes}")
    counts = [int(class_counts.get(c, 0)) for c in classes]
    if any(n < 0 for n in counts):
        raise ValidationError("class counts must be non-negative")
    values, labels = sample_generator(generator, counts, seed)
    n = len(labels)
    return SpectrogramCorpus(
        values=values.reshape(n, generator.spec.output_size, generator.spec.output_size),
        labels=labels,
        classes=classes,
        normalized=True,
        source_ids=[f"{origin}-{seed}-{i}" for i in range(n)],
        origins=[origin] * n,
    )


# ---------------------------------------------------------------------------
# Full training run
# ---------------------------------------------------------------------------


@dataclass
class TrainingRun:
    out_dir: Path
    config: TrainingConfig
    checkpoints: list = field(default_factory=list)  # (epoch, path)
    fid_history: list = field(default_factory=list)  # (epoch, fid)
    losses: list = field(default_factory=list)  # dicts with step / critic_loss / gen_loss
    stopped_early: bool = False

    @property
    def best(self) -> tuple[int, float]:
        if not self.fid_history:
            raise ValidationError("no FID evaluations recorded")
        return min(self.fid_history, key=lambda e: (e[1], e[0]))

    @property
    def best_checkpoint(self) -> Path:
        epoch, _ = self.best
        return dict(self.checkpoints)[epoch]

    @classmethod
    def load(cls, out_dir) -> "TrainingRun":
        out_dir = Path(out_dir)
        if not (out_dir / "fid.csv").is_file():
            raise FileNotFoundError(f"no fid.csv in run directory {out_dir}")
        cfg_path = out_dir / "config.json"
        config = TrainingConfig.from_dict(json.loads(cfg_path.read_text())["training"]) if cfg_path.is_file() else TrainingConfig()
        with open(out_dir / "fid.csv", newline="") as fh:
            fid = [(int(r["epoch"]), float(r["fid"])) for r in csv.DictReader(fh)]
        losses = []
        if (out_dir / "events.csv").is_file():
            with open(out_dir / "events.csv", newline="") as fh:
                losses = [
                    {"step": int(r["step"]), "critic_loss": float(r["critic_loss"]), "gen_loss": float(r["gen_loss"])}
                    for r in csv.DictReader(fh)
                ]
        checkpoints = [(e, out_dir / "checkpoints" / f"epoch_{e}") for e, _ in fid]
        return cls(out_dir, config, checkpoints, fid, losses)


def select_best_checkpoint(run_dir) -> tuple[int, float, Path]:
    run = TrainingRun.load(run_dir)
    epoch, fid = run.best
    return epoch, fid, run.best_checkpoint


def _should_evaluate(epoch: int, config: TrainingConfig) -> bool:
    return epoch == 1 or epoch % config.fid_eval_interval == 0 or epoch == config.max_epochs


def run_training(
    corpus: SpectrogramCorpus,
    config: TrainingConfig,
    out_dir,
    feature_fn: Callable[[np.ndarray], np.ndarray],
    generator_spec: GeneratorSpec | None = None,
    critic_spec: CriticSpec | None = None,
    resume: bool = False,
    extra_config: dict | None = None,
) -> TrainingRun:
    """Train a conditional WGAN-GP on ``corpus`` and track FID.

    ``feature_fn`` maps a stack of spectrograms ``(N, H, W)`` to feature
    vectors ``(N, d)``.  At every evaluation epoch (the first, every
    ``fid_eval_interval``-th and the last) the generator draws as many
    samples per class as the corpus holds, from a fixed latent seed, and
    a checkpoint is written.  Training halts at ``max_epochs`` or after
    ``patience`` evaluations without FID improvement.
    """
    if len(corpus) == 0:
        raise ValidationError("cannot train on an empty corpus")
    if not corpus.normalized:
        raise ValidationError("GAN training expects a normalized corpus")
    out_dir = Path(out_dir)
    size = corpus.values.shape[1]
    generator_spec = generator_spec or GeneratorSpec(n_classes=len(corpus.classes), output_size=size)
    critic_spec = critic_spec or CriticSpec(n_classes=len(corpus.classes), input_size=size)
    if generator_spec.n_classes != len(corpus.classes) or critic_spec.n_classes != len(corpus.classes):
        raise ValidationError("model class count does not match the corpus")
    if generator_spec.output_size != size or critic_spec.input_size != size:
        raise ShapeError(f"model size does not match {size}x{size} corpus spectrograms")

    torch.manual_seed(config.seed)
    generator, critic = Generator(generator_spec), Critic(critic_spec)
    state = init_state(generator, critic, config)
    run = TrainingRun(out_dir, config)
    start_epoch = 1
    best_fid, since_best = math.inf, 0

    if resume:
        prior = TrainingRun.load(out_dir)
        last_epoch, last_path = prior.checkpoints[-1]
        g, c, _ = load_checkpoint(last_path)
        generator.load_state_dict(g.state_dict())
        critic.load_state_dict(c.state_dict())
        saved = torch.load(last_path / TRAINER_STATE_FILE, weights_only=False)
        state.opt_g.load_state_dict(saved["opt_g"])
        state.opt_c.load_state_dict(saved["opt_c"])
        state.rng.set_state(saved["rng"])
        state.critic_updates, state.generator_updates = saved["critic_updates"], saved["generator_updates"]
        run.checkpoints, run.fid_history, run.losses = prior.checkpoints, prior.fid_history, prior.losses
        best_fid, since_best = saved["best_fid"], saved["since_best"]
        start_epoch = last_epoch + 1
        logger.info("resuming from epoch %d", last_epoch)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "checkpoints").mkdir(exist_ok=True)
        resolved = {"training": config.to_dict(), "generator": generator_spec.to_dict(),
                    "critic": critic_spec.to_dict(), "classes": corpus.classes, **(extra_config or {})}
        (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write run directory {out_dir}: {exc}") from exc

    data = torch.as_tensor(corpus.values, dtype=torch.float32)[:, None]
    labels = torch.as_tensor(corpus.labels, dtype=torch.long)
    counts = [corpus.per_class_counts[c] for c in corpus.classes]
    real_features = feature_fn(corpus.values)
    eval_seed = config.seed + 1
    batch = min(config.batch_size, len(corpus))
    generator.train()
    critic.train()

    for epoch in range(start_epoch, config.max_epochs + 1):
        order = torch.randperm(len(corpus), generator=state.rng)
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            if len(idx) < 2:
                continue
            step = train_step(state, data[idx], labels[idx], config)
            run.losses.append({"step": state.generator_updates, "critic_loss": step["critic_loss"], "gen_loss": step["gen_loss"]})

        if not _should_evaluate(epoch, config):
            continue
        fake, _ = sample_generator(generator, counts, eval_seed)
        fid = compute_fid(real_features, feature_fn(fake)).value
        if not math.isfinite(fid):
            raise NumericalError(f"non-finite FID at epoch {epoch}", {"fid": fid})
        run.fid_history.append((epoch, fid))
        if fid < best_fid:
            best_fid, since_best = fid, 0
        else:
            since_best += 1
        path = out_dir / "checkpoints" / f"epoch_{epoch}"
        try:
            save_checkpoint(path, generator, critic, extra={"epoch": epoch, "fid": fid, "classes": corpus.classes})
            torch.save(
                {"opt_g": state.opt_g.state_dict(), "opt_c": state.opt_c.state_dict(), "rng": state.rng.get_state(),
                 "critic_updates": state.critic_updates, "generator_updates": state.generator_updates,
                 "best_fid": best_fid, "since_best": since_best},
                path / TRAINER_STATE_FILE,
            )
        except OSError as exc:
            _write_logs(run)
            raise OSError(f"checkpoint write failed at epoch {epoch}: {exc}") from exc
        run.checkpoints.append((epoch, path))
        _write_logs(run)
        logger.info("epoch %d  FID %.4f  (best %.4f)", epoch, fid, best_fid)
        if since_best >= config.patience:
            run.stopped_early = True
            logger.info("no FID improvement for %d evaluations; stopping", since_best)
            break

    _write_logs(run)
    return run


def _write_logs(run: TrainingRun) -> None:
    with open(run.out_dir / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "critic_loss", "gen_loss"])
        for row in run.losses:
            w.writerow([row["step"], repr(row["critic_loss"]), repr(row["gen_loss"])])
    with open(run.out_dir / "fid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "fid"])
        for epoch, fid in run.fid_history:
            w.writerow([epoch, repr(fid)])
