"""Classical benchmark augmentations.

Waveform-domain: white noise at a target SNR, phase-vocoder time stretch,
and pitch shift (stretch followed by resampling back to the original
length).  Spectrogram-domain: SpecAugment frequency and time masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import signal

from specgan.dataset import (
    AudioClip,
    MelSpectrogram,
    SpectrogramConfig,
    SpectrogramCorpus,
    compute_mel_spectrograms,
    resample,
    window_sample_span,
)
from specgan.errors import ValidationError

WAVEFORM_KINDS = ("white_noise", "pitch_shift", "time_stretch")
SPECTROGRAM_KINDS = ("spec_augment",)

VOCODER_FFT = 2048
VOCODER_HOP = 512


# ---------------------------------------------------------------------------
# Waveform augmentations
# ---------------------------------------------------------------------------


def add_white_noise(clip: AudioClip, snr_db: float, seed: int) -> AudioClip:
    """Add Gaussian noise scaled to hit ``snr_db`` exactly, then clip to [-1, 1]."""
    if math.isinf(snr_db) and snr_db > 0:
        return replace(clip, samples=clip.samples.copy())
    power = float(np.mean(clip.samples**2))
    if power <= 0:
        raise ValidationError(f"clip {clip.source_id!r} is silent; SNR is undefined")
    noise = np.random.default_rng(seed).standard_normal(clip.samples.size)
    noise *= math.sqrt(power / 10 ** (snr_db / 10) / np.mean(noise**2))
    return replace(clip, samples=np.clip(clip.samples + noise, -1.0, 1.0))


def _stft(x, n_fft=VOCODER_FFT, hop=VOCODER_HOP):
    window = signal.get_window("hann", n_fft, fftbins=True)
    padded = np.pad(x, n_fft // 2, mode="reflect" if x.size > n_fft // 2 else "constant")
    n_frames = 1 + max(0, padded.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * window, axis=1).T


def _istft(spec, length, n_fft=VOCODER_FFT, hop=VOCODER_HOP):
    window = signal.get_window("hann", n_fft, fftbins=True)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window
    total = n_fft + hop * (frames.shape[0] - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, frame in enumerate(frames):
        out[i * hop : i * hop + n_fft] += frame
        norm[i * hop : i * hop + n_fft] += window**2
    out[norm > 1e-10] /= norm[norm > 1e-10]
    out = out[n_fft // 2 :]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def phase_vocoder(spec: np.ndarray, rate: float, hop: int = VOCODER_HOP) -> np.ndarray:
    """Resample STFT frames at step ``rate`` while keeping phase coherent."""
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    expected_advance = np.linspace(0, np.pi * hop, n_bins)
    padded = np.pad(spec, ((0, 0), (0, 2)))
    phase = np.angle(padded[:, 0])
    out = np.empty((n_bins, steps.size), dtype=complex)
    for t, step in enumerate(steps):
        i = int(step)
        left, right = padded[:, i], padded[:, i + 1]
        alpha = step - i
        mag = (1 - alpha) * np.abs(left) + alpha * np.abs(right)
        out[:, t] = mag * np.exp(1j * phase)
        dphi = np.angle(right) - np.angle(left) - expected_advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + expected_advance + dphi
    return out


def _stretch(samples: np.ndarray, rate: float) -> np.ndarray:
    target = int(round(samples.size / rate))
    return _istft(phase_vocoder(_stft(samples), rate), target)


def time_stretch(clip: AudioClip, rate: float) -> AudioClip:
    """Change duration by ``1 / rate`` without changing pitch."""
    if not 0.5 <= rate <= 2.0:
        raise ValidationError(f"time-stretch rate must lie in [0.5, 2.0], got {rate}")
    if rate == 1.0:
        return replace(clip, samples=clip.samples.copy())
    return replace(clip, samples=np.clip(_stretch(clip.samples, rate), -1.0, 1.0))


def pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Shift pitch by ``semitones`` while keeping the duration."""
    if abs(semitones) > 12:
        raise ValidationError(f"pitch shift must be within +-12 semitones, got {semitones}")
    if semitones == 0:
        return replace(clip, samples=clip.samples.copy())
    rate = 2.0 ** (-semitones / 12.0)
    stretched = _stretch(clip.samples, rate)
    shifted = signal.resample(stretched, clip.samples.size)
    return replace(clip, samples=np.clip(shifted, -1.0, 1.0))


# ---------------------------------------------------------------------------
# SpecAugment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mask:
    axis: str  # "freq" masks rows, "time" masks columns
    start: int
    width: int


def draw_masks(
    shape,
    n_freq_masks: int,
    max_freq_width: int,
    n_time_masks: int,
    max_time_width: int,
    seed: int,
    exact_width: bool = False,
) -> list[Mask]:
    n_rows, n_cols = shape
    if max_freq_width >= n_rows or max_time_width >= n_cols:
        raise ValidationError(
            f"mask widths must be smaller than the spectrogram ({n_rows}x{n_cols}), "
            f"got freq={max_freq_width} time={max_time_width}"
        )
    if min(n_freq_masks, n_time_masks, max_freq_width, max_time_width) < 0:
        raise ValidationError("mask counts and widths must be non-negative")
    rng = np.random.default_rng(seed)
    masks = []
    for axis, count, max_width, size in (
        ("freq", n_freq_masks, max_freq_width, n_rows),
        ("time", n_time_masks, max_time_width, n_cols),
    ):
        for _ in range(count):
            width = max_width if exact_width else int(rng.integers(0, max_width + 1))
            start = int(rng.integers(0, size - width + 1))
            masks.append(Mask(axis, start, width))
    return masks


def spec_augment(
    spec: MelSpectrogram,
    n_freq_masks: int = 2,
    max_freq_width: int = 8,
    n_time_masks: int = 2,
    max_time_width: int = 8,
    seed: int = 0,
    fill_value: float | None = None,
    exact_width: bool = False,
) -> MelSpectrogram:
    """Mask random frequency bands and time spans of ``spec``.

    Masked cells take ``fill_value``; by default that is 0 for normalized
    input (the corpus mean after z-scoring) and the spectrogram's own mean
    otherwise.
    """
    masks = draw_masks(
        spec.values.shape, n_freq_masks, max_freq_width, n_time_masks, max_time_width, seed, exact_width
    )
    if fill_value is None:
        fill_value = 0.0 if spec.normalized else float(spec.values.mean())
    out = spec.values.copy()
    for m in masks:
        if m.axis == "freq":
            out[m.start : m.start + m.width, :] = fill_value
        else:
            out[:, m.start : m.start + m.width] = fill_value
    return replace(spec, values=out)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

DEFAULT_PARAMS = {
    "white_noise": {"snr_db": [10.0, 30.0]},
    "pitch_shift": {"semitones": [-2.0, 2.0]},
    "time_stretch": {"rate": [0.8, 1.25]},
    "spec_augment": {"n_freq_masks": 2, "max_freq_width": 8, "n_time_masks": 2, "max_time_width": 8},
}

_LIMITS = {"white_noise": (-math.inf, math.inf), "pitch_shift": (-12.0, 12.0), "time_stretch": (0.5, 2.0)}


@dataclass(frozen=True)
class AugmentationPolicy:
    """An augmentation kind with its parameter ranges and seed.

    Waveform kinds hold one ``[low, high]`` range from which a value is
    drawn per sample; ``spec_augment`` holds the mask counts and widths.
    """

    kind: str
    params: dict = field(default_factory=dict)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise ValidationError(f"unknown augmentation kind {self.kind!r}; choose from {sorted(DEFAULT_PARAMS)}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        unknown = set(merged) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValidationError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        if self.kind in _LIMITS:
            (name,) = DEFAULT_PARAMS[self.kind]
            low, high = (float(v) for v in merged[name])
            lo_lim, hi_lim = _LIMITS[self.kind]
            if not lo_lim <= low <= high <= hi_lim:
                raise ValidationError(f"{self.kind} range {name}=[{low}, {high}] outside [{lo_lim}, {hi_lim}]")
            merged[name] = [low, high]
        else:
            for key, value in merged.items():
                if int(value) < 0:
                    raise ValidationError(f"{key} must be non-negative")
            if merged["max_freq_width"] >= 64 or merged["max_time_width"] >= 64:
                raise ValidationError("SpecAugment mask widths must be < 64")
        object.__setattr__(self, "params", merged)

    @property
    def is_waveform(self) -> bool:
        return self.kind in WAVEFORM_KINDS

    def draw(self, rng: np.random.Generator) -> float:
        (name,) = self.params
        low, high = self.params[name]
        return float(rng.uniform(low, high))

    def apply_clip(self, clip: AudioClip, rng: np.random.Generator) -> AudioClip:
        value = self.draw(rng)
        if self.kind == "white_noise":
            return add_white_noise(clip, value, int(rng.integers(2**31)))
        if self.kind == "pitch_shift":
            return pitch_shift(clip, value)
        if self.kind == "time_stretch":
            return time_stretch(clip, value)
        raise ValidationError(f"{self.kind} is not a waveform augmentation")

    def apply_spectrogram(self, spec: MelSpectrogram, rng: np.random.Generator) -> MelSpectrogram:
        if self.kind != "spec_augment":
            raise ValidationError(f"{self.kind} is not a spectrogram augmentation")
        return spec_augment(spec, **self.params, seed=int(rng.integers(2**31)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "rng_seed": self.rng_seed}


def augmented_window(
    clip: AudioClip,
    window_index: int,
    cfg: SpectrogramConfig,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> np.ndarray:
    """Log-mel window produced by augmenting the audio behind one spectrogram.

    Time stretching with a rate above 1 consumes more audio than one
    window; the segment is extended forward (or backward near the clip
    end) and the result is reflect-padded if the clip is still too short.
    """
    samples = resample(clip.samples, clip.sample_rate, cfg.sample_rate)
    start, stop = window_sample_span(window_index, cfg)
    need = stop - start
    value = policy.draw(rng)
    if policy.kind == "time_stretch":
        span = int(math.ceil(need * max(value, 1.0))) + cfg.hop_length
        start = max(0, min(start, samples.size - span))
        segment = samples[start : start + span]
        out = time_stretch(AudioClip(segment, cfg.sample_rate, clip.label), value).samples
    else:
        segment = AudioClip(samples[start:stop], cfg.sample_rate, clip.label)
        if policy.kind == "white_noise":
            power = float(np.mean(segment.samples**2))
            out = segment.samples if power == 0 else add_white_noise(segment, value, int(rng.integers(2**31))).samples
        else:
            out = pitch_shift(segment, value).samples
    if out.size < need:
        out = np.pad(out, (0, need - out.size), mode="reflect" if out.size > 1 else "constant")
    specs = compute_mel_spectrograms(AudioClip(out[:need], cfg.sample_rate, clip.label), cfg)
    return specs[0].values


def augment_corpus(
    corpus: SpectrogramCorpus,
    policy: AugmentationPolicy,
    clip_lookup: Callable[[str], AudioClip] | None = None,
    seed: int | None = None,
) -> SpectrogramCorpus:
    """One augmented copy of every item in ``corpus``.

    Merging the result with the input doubles every class count.
    Waveform policies need ``clip_lookup`` to recover the source audio by
    ``source_id``; their output is normalized with the corpus statistics.
    """
    rng = np.random.default_rng(policy.rng_seed if seed is None else seed)
    values = np.empty_like(corpus.values)
    if policy.is_waveform:
        if clip_lookup is None or corpus.config is None:
            raise ValidationError(f"{policy.kind} needs the source audio and the spectrogram config")
        cache: dict[str, AudioClip] = {}
        for i, (sid, w) in enumerate(zip(corpus.source_ids, corpus.window_index)):
            if sid not in cache:
                cache[sid] = clip_lookup(sid)
            window = augmented_window(cache[sid], int(w), corpus.config, policy, rng)
            if corpus.normalized:
                window = (window - corpus.stats.mean) / corpus.stats.std
            values[i] = window
    else:
        for i, spec in enumerate(corpus.spectrograms()):
            values[i] = policy.apply_spectrogram(spec, rng).values
    return replace(
        corpus,
        values=values,
        labels=corpus.labels.copy(),
        source_ids=list(corpus.source_ids),
        window_index=corpus.window_index.copy(),
        origins=[policy.kind] * len(corpus),
    )
