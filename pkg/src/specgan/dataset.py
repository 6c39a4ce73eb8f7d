"""Audio loading, log-mel spectrogram extraction and corpus normalization.

Spectrograms are cut from a clip with non-overlapping windows of
``frames_per_window`` STFT frames; trailing frames that do not fill a
whole window are dropped.  Normalization is a single z-score fitted over
every cell of every spectrogram in the corpus.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from specgan.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

AUDIO_SUFFIXES = (".wav", ".wave")
CORPUS_FORMAT = "specgan-corpus"
CORPUS_VERSION = 1


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: str
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"clip samples must be 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValidationError(f"clip {self.source_id!r} has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError(f"clip {self.source_id!r} contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as mono float64 in [-1, 1].

    Integer PCM is scaled by its full-scale value (24-bit data arrives
    left-justified in int32, so it shares the 32-bit scale).  Multichannel
    audio is downmixed by averaging channels.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"audio file not found: {path}")
    rate, data = wavfile.read(path)
    if data.dtype == np.uint8:
        audio = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        audio = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        audio = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        audio = data.astype(np.float64)
    else:
        raise ValidationError(f"unsupported WAV sample type {data.dtype} in {path}")
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    return np.clip(audio, -1.0, 1.0), int(rate)


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    g = math.gcd(int(orig_rate), int(target_rate))
    return signal.resample_poly(samples, target_rate // g, orig_rate // g)


def load_clip(path, label: str, source_id: str | None = None) -> AudioClip:
    samples, rate = read_wav(path)
    return AudioClip(samples, rate, label, source_id or str(path))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[tuple[Path, str]]
    per_class_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError(f"duplicate class names in {self.classes}")
        known = set(self.classes)
        for path, label in self.entries:
            if label not in known:
                raise ValidationError(f"unknown label {label!r} for {path}; classes are {self.classes}")
        self.entries = sorted(((Path(p), lbl) for p, lbl in self.entries), key=lambda e: str(e[0]))
        counts = {c: 0 for c in self.classes}
        for _, label in self.entries:
            counts[label] += 1
        self.per_class_counts = counts

    def __len__(self):
        return len(self.entries)

    def label_index(self, label: str) -> int:
        return self.classes.index(label)

    def clips(self) -> Iterable[AudioClip]:
        for path, label in self.entries:
            yield load_clip(path, label, source_id=path.name)


def load_manifest(path) -> DatasetManifest:
    """Load a dataset manifest.

    ``path`` is either a JSON file ``{"classes": [...], "entries":
    [{"path": ..., "label": ...}]}`` (relative paths resolve against the
    file's directory) or a directory holding one subdirectory of WAV files
    per class.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")

    if path.is_dir():
        classes = sorted(p.name for p in path.iterdir() if p.is_dir())
        entries = [
            (wav, cls)
            for cls in classes
            for wav in sorted((path / cls).iterdir())
            if wav.suffix.lower() in AUDIO_SUFFIXES
        ]
        classes = [c for c in classes if any(lbl == c for _, lbl in entries)]
    else:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or "classes" not in raw or "entries" not in raw:
            raise ValidationError(f"{path}: manifest needs 'classes' and 'entries' keys")
        classes = [str(c) for c in raw["classes"]]
        entries = []
        for i, item in enumerate(raw["entries"]):
            try:
                p, label = Path(item["path"]), str(item["label"])
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"{path}: entry {i} needs 'path' and 'label'") from exc
            entries.append((p if p.is_absolute() else path.parent / p, label))

    if not entries:
        raise ValidationError(f"manifest {path} has no entries")
    for p, _ in entries:
        if not p.is_file():
            raise FileNotFoundError(f"audio file referenced by {path} not found: {p}")
    return DatasetManifest(classes, entries)


# ---------------------------------------------------------------------------
# Spectrograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrogramConfig:
    n_fft: int = 1024
    hop_length: int = 256
    n_mels: int = 64
    frames_per_window: int = 64
    sample_rate: int = 44100
    fmin: float = 20.0
    fmax: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10
    resample: bool = True

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop_length <= 0:
            raise ValidationError("n_fft and hop_length must be positive")
        if self.hop_length > self.n_fft:
            raise ValidationError(f"hop_length {self.hop_length} exceeds n_fft {self.n_fft}")
        if self.n_mels < 1 or self.frames_per_window < 1:
            raise ValidationError("n_mels and frames_per_window must be positive")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not (0 <= self.fmin < self.upper_frequency <= self.sample_rate / 2):
            raise ValidationError(
                f"need 0 <= fmin < fmax <= Nyquist, got fmin={self.fmin}, fmax={self.upper_frequency}"
            )
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be positive")

    @property
    def upper_frequency(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_mels, self.frames_per_window)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SpectrogramConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown spectrogram config keys: {sorted(unknown)}")
        return cls(**data)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: SpectrogramConfig) -> np.ndarray:
    """``n_mels + 2`` frequencies in Hz, evenly spaced on the mel scale."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_frequency), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_band_edges(cfg)
    bin_freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) == 0)
    if empty.size:
        logger.warning("mel filters %s cover no FFT bin; increase n_fft or fmin", empty.tolist())
    return fb


def frame_count(n_samples: int, cfg: SpectrogramConfig) -> int:
    if n_samples < cfg.n_fft:
        return 0
    return 1 + (n_samples - cfg.n_fft) // cfg.hop_length


def window_sample_span(window_index: int, cfg: SpectrogramConfig) -> tuple[int, int]:
    """Sample range ``[start, stop)`` feeding window ``window_index``."""
    start = window_index * cfg.frames_per_window * cfg.hop_length
    return start, start + (cfg.frames_per_window - 1) * cfg.hop_length + cfg.n_fft


def stft_power(samples: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Power spectrogram ``|STFT|^2`` of shape ``(n_fft // 2 + 1, n_frames)``.

    Frames are taken without centering or padding: frame ``i`` covers
    samples ``[i * hop, i * hop + n_fft)``.
    """
    n_frames = frame_count(len(samples), cfg)
    n_bins = cfg.n_fft // 2 + 1
    if n_frames == 0:
        return np.zeros((n_bins, 0))
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.n_fft)[:: cfg.hop_length][:n_frames]
    window = signal.get_window("hann", cfg.n_fft, fftbins=True)
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


@dataclass
class MelSpectrogram:
    values: np.ndarray
    label: str
    normalized: bool = False
    source_id: str = ""
    window_index: int = 0
    origin: str = "real"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"spectrogram must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"spectrogram {self.source_id}:{self.window_index} has non-finite values")

    @property
    def shape(self):
        return self.values.shape


def compute_mel_spectrograms(clip: AudioClip, cfg: SpectrogramConfig) -> list[MelSpectrogram]:
    """Cut ``clip`` into whole, non-overlapping log-mel windows."""
    samples = clip.samples
    if clip.sample_rate != cfg.sample_rate:
        if not cfg.resample:
            raise ValidationError(
                f"clip {clip.source_id!r} is {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz "
                "and resampling is disabled"
            )
        samples = resample(samples, clip.sample_rate, cfg.sample_rate)

    power = stft_power(samples, cfg)
    n_windows = power.shape[1] // cfg.frames_per_window
    if n_windows == 0:
        return []
    mel = mel_filterbank(cfg) @ power[:, : n_windows * cfg.frames_per_window]
    log_mel = np.log(mel + cfg.log_floor)
    return [
        MelSpectrogram(
            log_mel[:, w * cfg.frames_per_window : (w + 1) * cfg.frames_per_window],
            clip.label,
            normalized=False,
            source_id=clip.source_id,
            window_index=w,
        )
        for w in range(n_windows)
    ]


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float
    n_samples: int

    def __post_init__(self):
        if not self.std > 0:
            raise ValidationError(f"normalization std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls(float(data["mean"]), float(data["std"]), int(data["n_samples"]))


def _as_arrays(specs) -> list[np.ndarray]:
    out = []
    for s in specs:
        if isinstance(s, MelSpectrogram):
            if s.normalized:
                raise ValidationError("fit_normalization expects unnormalized spectrograms")
            out.append(s.values)
        else:
            out.append(np.asarray(s, dtype=np.float64))
    return out


def fit_normalization(specs) -> NormalizationStats:
    """Scalar mean and population std over all cells of all spectrograms."""
    arrays = _as_arrays(specs)
    if not arrays:
        raise ValidationError("cannot fit normalization on an empty corpus")
    n = sum(a.size for a in arrays)
    mean = math.fsum(float(a.sum()) for a in arrays) / n
    var = math.fsum(float(((a - mean) ** 2).sum()) for a in arrays) / n
    if var <= 0:
        raise ValidationError(
            "corpus has zero variance (every cell is identical); it is degenerate and cannot be normalized"
        )
    return NormalizationStats(mean, math.sqrt(var), len(arrays))


def normalize(spec: MelSpectrogram, stats: NormalizationStats) -> MelSpectrogram:
    if spec.normalized:
        raise ValidationError("spectrogram is already normalized")
    return replace(spec, values=(spec.values - stats.mean) / stats.std, normalized=True)


def denormalize(spec: MelSpectrogram, stats: NormalizationStats) -> MelSpectrogram:
    if not spec.normalized:
        raise ValidationError("spectrogram is not normalized")
    return replace(spec, values=spec.values * stats.std + stats.mean, normalized=False)


# ---------------------------------------------------------------------------
# Corpus container and persistence
# ---------------------------------------------------------------------------


@dataclass
class SpectrogramCorpus:
    """A labeled stack of equally shaped spectrograms, shape ``(N, H, W)``."""

    values: np.ndarray
    labels: np.ndarray
    classes: list[str]
    normalized: bool = False
    stats: NormalizationStats | None = None
    config: SpectrogramConfig | None = None
    source_ids: list[str] = field(default_factory=list)
    window_index: np.ndarray | None = None
    origins: list[str] = field(default_factory=list)
    config_hash: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"corpus values must be (N, H, W), got {self.values.shape}")
        n = self.values.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ValidationError("corpus label index out of range")
        self.source_ids = list(self.source_ids) or [""] * n
        self.origins = list(self.origins) or ["real"] * n
        self.window_index = (
            np.zeros(n, dtype=np.int64) if self.window_index is None else np.asarray(self.window_index, dtype=np.int64)
        )
        if not (len(self.source_ids) == len(self.origins) == len(self.window_index) == n):
            raise ShapeError("per-item metadata length does not match number of spectrograms")

    def __len__(self):
        return self.values.shape[0]

    @property
    def per_class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.classes))
        return {c: int(k) for c, k in zip(self.classes, counts)}

    def subset(self, indices) -> "SpectrogramCorpus":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            values=self.values[idx],
            labels=self.labels[idx],
            source_ids=[self.source_ids[i] for i in idx],
            window_index=self.window_index[idx],
            origins=[self.origins[i] for i in idx],
        )

    def concat(self, other: "SpectrogramCorpus") -> "SpectrogramCorpus":
        if other.classes != self.classes:
            raise ValidationError("cannot merge corpora with different class lists")
        if other.normalized != self.normalized:
            raise ValidationError("cannot merge normalized with unnormalized corpora")
        if len(other) and other.values.shape[1:] != self.values.shape[1:]:
            raise ShapeError(f"spectrogram shape {other.values.shape[1:]} != {self.values.shape[1:]}")
        return replace(
            self,
            values=np.concatenate([self.values, other.values.reshape((-1,) + self.values.shape[1:])]),
            labels=np.concatenate([self.labels, other.labels]),
            source_ids=self.source_ids + other.source_ids,
            window_index=np.concatenate([self.window_index, other.window_index]),
            origins=self.origins + other.origins,
        )

    def spectrograms(self) -> list[MelSpectrogram]:
        return [
            MelSpectrogram(v, self.classes[l], self.normalized, s, int(w), o)
            for v, l, s, w, o in zip(self.values, self.labels, self.source_ids, self.window_index, self.origins)
        ]

    @classmethod
    def from_spectrograms(
        cls,
        specs: Sequence[MelSpectrogram],
        classes: Sequence[str],
        stats: NormalizationStats | None = None,
        config: SpectrogramConfig | None = None,
        shape: tuple[int, int] | None = None,
    ) -> "SpectrogramCorpus":
        classes = list(classes)
        flags = {s.normalized for s in specs}
        if len(flags) > 1:
            raise ValidationError("mixed normalized and unnormalized spectrograms")
        if specs:
            values = np.stack([s.values for s in specs])
        else:
            h, w = shape or (config.shape if config else (0, 0))
            values = np.zeros((0, h, w))
        return cls(
            values=values,
            labels=[classes.index(s.label) for s in specs],
            classes=classes,
            normalized=flags.pop() if flags else stats is not None,
            stats=stats,
            config=config,
            source_ids=[s.source_id for s in specs],
            window_index=[s.window_index for s in specs],
            origins=[s.origin for s in specs],
        )

    def normalized_with(self, stats: NormalizationStats) -> "SpectrogramCorpus":
        if self.normalized:
            raise ValidationError("corpus is already normalized")
        return replace(self, values=(self.values - stats.mean) / stats.std, normalized=True, stats=stats)

    # -- persistence --------------------------------------------------------

    def header(self) -> dict:
        return {
            "format": CORPUS_FORMAT,
            "version": CORPUS_VERSION,
            "dtype": "<f4",
            "shape": list(self.values.shape),
            "classes": list(self.classes),
            "labels": [int(l) for l in self.labels],
            "source_ids": list(self.source_ids),
            "window_index": [int(w) for w in self.window_index],
            "origins": list(self.origins),
            "normalized": bool(self.normalized),
            "normalization": self.stats.to_dict() if self.stats else None,
            "spectrogram_config": self.config.to_dict() if self.config else None,
            "config_hash": self.config_hash,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(line + b"\n")
            fh.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path) -> "SpectrogramCorpus":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"corpus file not found: {path}")
        blob = path.read_bytes()
        nl = blob.find(b"\n")
        if nl < 0:
            raise ValidationError(f"{path}: missing corpus header line")
        header = json.loads(blob[:nl].decode("utf-8"))
        if header.get("format") != CORPUS_FORMAT:
            raise ValidationError(f"{path}: not a spectrogram corpus file")
        shape = tuple(header["shape"])
        payload = blob[nl + 1 :]
        expected = int(np.prod(shape)) * 4
        if len(payload) != expected:
            raise ValidationError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
        values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        norm = header.get("normalization")
        cfg = header.get("spectrogram_config")
        return cls(
            values=values,
            labels=header["labels"],
            classes=header["classes"],
            normalized=header["normalized"],
            stats=NormalizationStats.from_dict(norm) if norm else None,
            config=SpectrogramConfig.from_dict(cfg) if cfg else None,
            source_ids=header.get("source_ids") or [],
            window_index=header.get("window_index"),
            origins=header.get("origins") or [],
            config_hash=header.get("config_hash"),
        )


def build_corpus(
    manifest: DatasetManifest, cfg: SpectrogramConfig, normalize_corpus: bool = True
) -> SpectrogramCorpus:
    """Extract spectrograms for every manifest entry, in manifest order."""
    specs: list[MelSpectrogram] = []
    for clip in manifest.clips():
        windows = compute_mel_spectrograms(clip, cfg)
        if not windows:
            logger.warning("clip %s is shorter than one %d-frame window; skipped", clip.source_id, cfg.frames_per_window)
        specs.extend(windows)
    corpus = SpectrogramCorpus.from_spectrograms(specs, manifest.classes, config=cfg)
    if normalize_corpus and len(corpus):
        corpus = corpus.normalized_with(fit_normalization(corpus.values))
    return corpus


def sha256_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()
