"""Conditional generator and critic networks.

Tensors inside the modules are NCHW.  The ``*_forward`` helpers accept
and return channels-last arrays ``(B, H, W, C)`` for callers that think
in spectrogram-image terms.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn
from torch.nn import functional as F

from specgan.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

ARCHITECTURE_FILE = "architecture.json"
WEIGHTS_FILE = "weights.safetensors"

# parameter counts reported for the reference networks
REFERENCE_GENERATOR_PARAMS = 1_537_316
REFERENCE_CRITIC_PARAMS = 4_321_153
REFERENCE_SE_STAGE_PARAMS = 11_232


def _strict_from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kwargs)


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 128
    n_classes: int = 6
    embedding_dim: int = 16
    start_channels: int = 256
    block_channels: tuple = (256, 256, 64, 64)
    se_channels: int = 64
    se_reduction: int = 16
    use_se: bool = True
    output_size: int = 64
    kernel_size: int = 3
    leaky_slope: float = 0.2
    conditioning: str = "concat_latent"

    def __post_init__(self):
        n_up = len(self.block_channels) + 1
        if self.output_size % 2**n_up:
            raise ValidationError(
                f"output_size {self.output_size} is not divisible by 2**{n_up} "
                f"({len(self.block_channels)} upsampling blocks plus the output layer)"
            )
        if self.use_se:
            if self.se_channels != self.block_channels[-1]:
                raise ValidationError("se_channels must equal the last block's channels for the residual skip")
            if self.se_channels % self.se_reduction:
                raise ValidationError(f"se_channels {self.se_channels} not divisible by r={self.se_reduction}")
        if self.conditioning != "concat_latent":
            raise ValidationError(f"unsupported generator conditioning {self.conditioning!r}")

    @property
    def start_size(self) -> int:
        return self.output_size // 2 ** (len(self.block_channels) + 1)

    @property
    def feature_size(self) -> int:
        """Spatial size of the map entering the output layer."""
        return self.output_size // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        return _strict_from_dict(cls, data)


@dataclass(frozen=True)
class CriticSpec:
    n_classes: int = 6
    conv_channels: tuple = (64, 128, 256, 512)
    kernel_size: int = 5
    input_size: int = 64
    leaky_slope: float = 0.2
    conditioning: str = "label_channel"

    def __post_init__(self):
        if self.input_size % 2 ** len(self.conv_channels):
            raise ValidationError(
                f"input_size {self.input_size} not divisible by 2**{len(self.conv_channels)} stride-2 convolutions"
            )
        if self.conditioning != "label_channel":
            raise ValidationError(f"unsupported critic conditioning {self.conditioning!r}")

    @property
    def final_size(self) -> int:
        return self.input_size // 2 ** len(self.conv_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CriticSpec":
        return _strict_from_dict(cls, data)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, std)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)


class SqueezeExcitation(nn.Module):
    """Channel gating ``s = sigmoid(W2 relu(W1 z + b1) + b2)``.

    ``z`` is the per-channel spatial mean of the input; each input channel
    is multiplied by its gate ``s[c]``.  ``fc1.weight`` is ``W1`` with shape
    ``(C / r, C)`` and ``fc2.weight`` is ``W2`` with shape ``(C, C / r)``.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ValidationError(f"channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SE block expects {self.channels} channels, got {x.shape[1]}")
        z = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(z))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)[:, :, None, None]


class SEResidualStage(nn.Module):
    def __init__(self, channels: int, reduction: int, kernel_size: int, slope: float):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.se = SqueezeExcitation(channels, reduction)
        self.slope = slope

    def forward(self, x):
        h = F.leaky_relu(self.conv(x), self.slope)
        return x + self.se(h)


class UpBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, slope: float):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, padding=kernel_size // 2)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")), self.slope)


class Generator(nn.Module):
    """Label-conditioned generator: latent -> ``(B, 1, S, S)`` spectrogram.

    A learned label embedding is concatenated to the latent and projected
    to a small feature map, which goes through upsampling blocks, the
    optional SE-residual stage, and an upsampling linear output layer.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        s0, c0 = spec.start_size, spec.start_channels
        self.embedding = nn.Embedding(spec.n_classes, spec.embedding_dim)
        self.project = nn.Linear(spec.latent_dim + spec.embedding_dim, c0 * s0 * s0)
        blocks = []
        c_in = c0
        for c_out in spec.block_channels:
            blocks.append(UpBlock(c_in, c_out, spec.kernel_size, spec.leaky_slope))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.se_stage = (
            SEResidualStage(spec.se_channels, spec.se_reduction, spec.kernel_size, spec.leaky_slope)
            if spec.use_se
            else None
        )
        self.output = nn.Conv2d(c_in, 1, spec.kernel_size, padding=spec.kernel_size // 2)
        init_weights(self)

    def layer_names(self) -> list[str]:
        names = [f"block{i + 1}" for i in range(len(self.blocks))]
        if self.se_stage is not None:
            names += ["se_conv", "se_stage"]
        return names + ["pre_output"]

    def forward(self, z: torch.Tensor, labels: torch.Tensor, capture: dict | None = None) -> torch.Tensor:
        spec = self.spec
        if z.ndim != 2 or z.shape[1] != spec.latent_dim:
            raise ShapeError(f"latent must be (B, {spec.latent_dim}), got {tuple(z.shape)}")
        labels = _check_labels(labels, spec.n_classes, z.shape[0])
        h = torch.cat([z, self.embedding(labels)], dim=1)
        h = F.leaky_relu(self.project(h), spec.leaky_slope)
        h = h.view(-1, spec.start_channels, spec.start_size, spec.start_size)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if capture is not None:
                capture[f"block{i + 1}"] = h
        if self.se_stage is not None:
            if capture is not None:
                conv = F.leaky_relu(self.se_stage.conv(h), spec.leaky_slope)
                capture["se_conv"] = conv
                h = h + self.se_stage.se(conv)
                capture["se_stage"] = h
            else:
                h = self.se_stage(h)
        if capture is not None:
            capture["pre_output"] = h
        return self.output(F.interpolate(h, scale_factor=2, mode="nearest"))


class Critic(nn.Module):
    """Fully convolutional conditional critic returning one unbounded score per sample.

    The label enters as one-hot planes stacked onto the input channel.
    Stride-2 convolutions shrink the map; a final valid convolution
    covering the remaining map yields the score.
    """

    def __init__(self, spec: CriticSpec = CriticSpec()):
        super().__init__()
        self.spec = spec
        convs = []
        c_in = 1 + spec.n_classes
        for c_out in spec.conv_channels:
            convs.append(nn.Conv2d(c_in, c_out, spec.kernel_size, stride=2, padding=spec.kernel_size // 2))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.score = nn.Conv2d(c_in, 1, spec.final_size)
        init_weights(self)

    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, spec.input_size, spec.input_size):
            raise ShapeError(f"critic input must be (B, 1, {spec.input_size}, {spec.input_size}), got {tuple(x.shape)}")
        labels = _check_labels(labels, spec.n_classes, x.shape[0])
        onehot = F.one_hot(labels, spec.n_classes).to(x.dtype)[:, :, None, None]
        h = torch.cat([x, onehot.expand(-1, -1, x.shape[2], x.shape[3])], dim=1)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), spec.leaky_slope)
        return self.score(h).flatten()


def _check_labels(labels, n_classes: int, batch: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() == 1 and batch > 1:
        labels = labels.expand(batch)
    if labels.numel() != batch:
        raise ShapeError(f"got {labels.numel()} labels for a batch of {batch}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"label index out of range [0, {n_classes})")
    return labels


def build_generator(spec: GeneratorSpec = GeneratorSpec()) -> Generator:
    return Generator(spec)


def build_baseline_generator(spec: GeneratorSpec = GeneratorSpec()) -> Generator:
    """The same generator with the SE-residual stage removed."""
    data = spec.to_dict()
    data["use_se"] = False
    return Generator(GeneratorSpec.from_dict(data))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def se_stage_parameters(spec: GeneratorSpec) -> int:
    c, r, k = spec.se_channels, spec.se_reduction, spec.kernel_size
    conv = k * k * c * c + c
    se = 2 * c * c // r + c // r + c
    return conv + se


# ---------------------------------------------------------------------------
# channels-last helpers
# ---------------------------------------------------------------------------


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def se_forward(features, se: SqueezeExcitation, residual: bool = False) -> torch.Tensor:
    """Apply ``se`` to a channels-last ``(H, W, C)`` or ``(B, H, W, C)`` map."""
    x = _to_tensor(features)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != se.channels:
        raise ShapeError(f"expected (..., H, W, {se.channels}) features, got {tuple(x.shape)}")
    nchw = x.permute(0, 3, 1, 2)
    out = se(nchw)
    if residual:
        out = nchw + out
    out = out.permute(0, 2, 3, 1)
    return out[0] if single else out


def generator_forward(generator: Generator, z, labels) -> torch.Tensor:
    """Generated spectrograms as ``(B, S, S, 1)``."""
    return generator(_to_tensor(z), labels).permute(0, 2, 3, 1)


def critic_forward(critic: Critic, x, labels) -> torch.Tensor:
    """Scores for channels-last input ``(B, S, S, 1)``."""
    x = _to_tensor(x)
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ShapeError(f"critic input must be (B, S, S, 1), got {tuple(x.shape)}")
    return critic(x.permute(0, 3, 1, 2), labels)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, generator: Generator, critic: Critic | None = None, extra: dict | None = None) -> Path:
    """Write ``architecture.json`` plus float32 safetensors weights into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arch = {"generator": generator.spec.to_dict(), "critic": critic.spec.to_dict() if critic else None}
    if extra:
        arch["extra"] = extra
    tensors = {f"generator.{k}": v.detach().to(torch.float32).contiguous() for k, v in generator.state_dict().items()}
    if critic is not None:
        tensors.update({f"critic.{k}": v.detach().to(torch.float32).contiguous() for k, v in critic.state_dict().items()})
    save_file(tensors, str(path / WEIGHTS_FILE))
    (path / ARCHITECTURE_FILE).write_text(json.dumps(arch, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[Generator, Critic | None, dict]:
    path = Path(path)
    arch_file, weights_file = path / ARCHITECTURE_FILE, path / WEIGHTS_FILE
    for f in (arch_file, weights_file):
        if not f.is_file():
            raise FileNotFoundError(f"checkpoint file missing: {f}")
    arch = json.loads(arch_file.read_text())
    tensors = load_file(str(weights_file))
    generator = Generator(GeneratorSpec.from_dict(arch["generator"]))
    generator.load_state_dict({k[len("generator.") :]: v for k, v in tensors.items() if k.startswith("generator.")})
    critic = None
    if arch.get("critic"):
        critic = Critic(CriticSpec.from_dict(arch["critic"]))
        critic.load_state_dict({k[len("critic.") :]: v for k, v in tensors.items() if k.startswith("critic.")})
    generator.eval()
    return generator, critic, arch.get("extra", {})
