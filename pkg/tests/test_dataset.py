import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from specgan.dataset import (
    AudioClip,
    MelSpectrogram,
    SpectrogramConfig,
    SpectrogramCorpus,
    build_corpus,
    compute_mel_spectrograms,
    denormalize,
    fit_normalization,
    frame_count,
    load_manifest,
    mel_center_frequencies,
    mel_filterbank,
    normalize,
    read_wav,
)
from specgan.errors import ValidationError

CFG = SpectrogramConfig()


def samples_for_frames(n_frames, cfg=CFG):
    return cfg.n_fft + (n_frames - 1) * cfg.hop_length


def write_wav(path, samples, rate=44100, dtype=np.int16):
    path.parent.mkdir(parents=True, exist_ok=True)
    if dtype == np.int16:
        wavfile.write(path, rate, (np.asarray(samples) * 32767).astype(np.int16))
    else:
        wavfile.write(path, rate, np.asarray(samples, dtype=dtype))
    return path


# -- oracles ---------------------------------------------------------------


def dft_power_oracle(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    return np.abs(basis @ frame) ** 2


def triangular_filters_oracle(cfg):
    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    lo, hi = to_mel(cfg.fmin), to_mel(cfg.upper_frequency)
    edges = [to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1)) for i in range(cfg.n_mels + 2)]
    n_bins = cfg.n_fft // 2 + 1
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        for b in range(n_bins):
            f = b * cfg.sample_rate / cfg.n_fft
            if left < f <= center:
                fb[m, b] = (f - left) / (center - left)
            elif center < f < right:
                fb[m, b] = (right - f) / (right - center)
    return fb


# -- manifest --------------------------------------------------------------


def test_manifest_from_directory_single_wav(tmp_path):
    write_wav(tmp_path / "Sawing" / "a.wav", np.zeros(2048))
    m = load_manifest(tmp_path)
    assert m.classes == ["Sawing"]
    assert len(m.entries) == 1
    assert m.per_class_counts == {"Sawing": 1}


def test_manifest_json_sorted_and_counted(tmp_path):
    for name in ("c.wav", "a.wav", "b.wav"):
        write_wav(tmp_path / "audio" / name, np.zeros(2048))
    doc = {
        "classes": ["Drill", "Saw"],
        "entries": [
            {"path": "audio/c.wav", "label": "Saw"},
            {"path": "audio/a.wav", "label": "Drill"},
            {"path": "audio/b.wav", "label": "Saw"},
        ],
    }
    (tmp_path / "m.json").write_text(json.dumps(doc))
    m = load_manifest(tmp_path / "m.json")
    assert [p.name for p, _ in m.entries] == ["a.wav", "b.wav", "c.wav"]
    assert m.per_class_counts == {"Drill": 1, "Saw": 2}
    assert sum(m.per_class_counts.values()) == len(m.entries)


def test_manifest_missing_file_names_path(tmp_path):
    doc = {"classes": ["Saw"], "entries": [{"path": "nope.wav", "label": "Saw"}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError, match="nope.wav"):
        load_manifest(tmp_path / "m.json")


def test_manifest_unknown_label_and_empty(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(2048))
    (tmp_path / "bad.json").write_text(
        json.dumps({"classes": ["Saw"], "entries": [{"path": "a.wav", "label": "Drill"}]})
    )
    with pytest.raises(ValidationError, match="unknown label"):
        load_manifest(tmp_path / "bad.json")
    (tmp_path / "empty.json").write_text(json.dumps({"classes": ["Saw"], "entries": []}))
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "empty.json")


def test_read_wav_formats_and_stereo_downmix(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 20, 4000))
    stereo = np.stack([x, -x * 0.0 + x * 0.5], axis=1)
    for dtype in (np.int16, np.float32):
        p = write_wav(tmp_path / f"{np.dtype(dtype).name}.wav", x, dtype=dtype)
        y, rate = read_wav(p)
        assert rate == 44100
        np.testing.assert_allclose(y, x, atol=1e-4)
    wavfile.write(tmp_path / "i32.wav", 16000, (x * 2**31 * 0.999).astype(np.int32))
    y, _ = read_wav(tmp_path / "i32.wav")
    np.testing.assert_allclose(y, x * 0.999, atol=1e-6)
    wavfile.write(tmp_path / "st.wav", 44100, stereo.astype(np.float32))
    y, _ = read_wav(tmp_path / "st.wav")
    np.testing.assert_allclose(y, stereo.mean(axis=1), atol=1e-6)


# -- spectrograms ----------------------------------------------------------


@pytest.mark.parametrize("frames, expected", [(63, 0), (64, 1), (127, 1), (128, 2), (200, 3)])
def test_window_count_is_floor_division(frames, expected):
    n = samples_for_frames(frames)
    assert frame_count(n, CFG) == frames
    clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, n), 44100, "x", "c")
    specs = compute_mel_spectrograms(clip, CFG)
    assert len(specs) == expected
    for i, s in enumerate(specs):
        assert s.values.shape == (64, 64)
        assert s.label == "x" and s.window_index == i and not s.normalized


def test_silence_is_log_floor():
    clip = AudioClip(np.zeros(samples_for_frames(64)), 44100, "quiet")
    (spec,) = compute_mel_spectrograms(clip, CFG)
    np.testing.assert_array_equal(spec.values, np.full((64, 64), math.log(CFG.log_floor)))


def test_spectrograms_bitwise_deterministic():
    x = np.random.default_rng(3).uniform(-1, 1, samples_for_frames(130))
    a = compute_mel_spectrograms(AudioClip(x, 44100, "a"), CFG)
    b = compute_mel_spectrograms(AudioClip(x.copy(), 44100, "a"), CFG)
    for s, t in zip(a, b):
        assert s.values.tobytes() == t.values.tobytes()


def test_filterbank_matches_explicit_triangles():
    np.testing.assert_allclose(mel_filterbank(CFG), triangular_filters_oracle(CFG), atol=1e-12)


def test_filterbank_shape_invariants():
    fb = mel_filterbank(CFG)
    assert np.all(fb >= 0)
    peaks = fb.argmax(axis=1)
    assert np.all(np.diff(peaks) > 0)
    for row in fb:
        support = np.flatnonzero(row > 0)
        assert support.size > 0
        assert np.all(np.diff(support) == 1)
        # rises to a single peak then falls
        vals = row[support]
        k = int(np.argmax(vals))
        assert np.all(np.diff(vals[: k + 1]) >= 0) and np.all(np.diff(vals[k:]) <= 0)


def test_sinusoid_peak_lands_in_nearest_mel_band():
    cfg = SpectrogramConfig(fmin=0.0)
    n = samples_for_frames(64, cfg)
    t = np.arange(n) / cfg.sample_rate
    x = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
    (spec,) = compute_mel_spectrograms(AudioClip(x, cfg.sample_rate, "tone"), cfg)

    fb = triangular_filters_oracle(cfg)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.n_fft) / cfg.n_fft)
    expected_band = int(np.argmin(np.abs(mel_center_frequencies(cfg) - 1000.0)))
    for f in range(cfg.frames_per_window):
        frame = x[f * cfg.hop_length : f * cfg.hop_length + cfg.n_fft] * window
        oracle = np.log(fb @ dft_power_oracle(frame) + cfg.log_floor)
        np.testing.assert_allclose(spec.values[:, f], oracle, rtol=1e-6, atol=1e-6)
        assert abs(int(np.argmax(spec.values[:, f])) - expected_band) <= 1


def test_resampling_and_disabled_resampling():
    cfg = SpectrogramConfig(sample_rate=22050)
    x = np.random.default_rng(1).uniform(-0.3, 0.3, 44100)
    specs = compute_mel_spectrograms(AudioClip(x, 44100, "a"), cfg)
    assert len(specs) == frame_count(22050, cfg) // 64
    with pytest.raises(ValidationError, match="resampling is disabled"):
        compute_mel_spectrograms(AudioClip(x, 44100, "a"), SpectrogramConfig(sample_rate=22050, resample=False))


def test_config_validation():
    with pytest.raises(ValidationError):
        SpectrogramConfig(n_fft=256, hop_length=512)
    with pytest.raises(ValidationError):
        SpectrogramConfig(fmin=30000.0)
    with pytest.raises(ValidationError):
        SpectrogramConfig.from_dict({"n_fft": 512, "hop": 128})


# -- normalization ---------------------------------------------------------


def test_fit_two_point_distribution():
    specs = [MelSpectrogram(np.zeros((64, 64)), "a"), MelSpectrogram(np.full((64, 64), 2.0), "a")]
    stats = fit_normalization(specs)
    assert stats.mean == 1.0 and stats.std == 1.0 and stats.n_samples == 2


def test_fit_matches_two_pass_accumulation():
    rng = np.random.default_rng(7)
    specs = [MelSpectrogram(rng.normal(-5, 3, (64, 64)), "a") for _ in range(9)]
    total, count = 0.0, 0
    for s in specs:
        for v in s.values.ravel():
            total += v
            count += 1
    mean = total / count
    sq = 0.0
    for s in specs:
        for v in s.values.ravel():
            sq += (v - mean) ** 2
    std = math.sqrt(sq / count)
    stats = fit_normalization(specs)
    assert stats.mean == pytest.approx(mean, rel=1e-6)
    assert stats.std == pytest.approx(std, rel=1e-6)


def test_fit_constant_corpus_is_rejected():
    with pytest.raises(ValidationError, match="degenerate"):
        fit_normalization([MelSpectrogram(np.full((64, 64), -3.0), "a")])


def test_normalize_cases():
    rng = np.random.default_rng(11)
    specs = [MelSpectrogram(rng.normal(-10, 4, (64, 64)), "a") for _ in range(5)]
    stats = fit_normalization(specs)
    at_mean = normalize(MelSpectrogram(np.full((64, 64), stats.mean), "a"), stats)
    np.testing.assert_allclose(at_mean.values, 0.0, atol=1e-12)
    one_sigma = normalize(MelSpectrogram(np.full((64, 64), stats.mean + stats.std), "a"), stats)
    np.testing.assert_allclose(one_sigma.values, 1.0, atol=1e-12)

    normed = [normalize(s, stats) for s in specs]
    allv = np.concatenate([s.values.ravel() for s in normed])
    assert abs(allv.mean()) < 1e-6 and abs(allv.std() - 1.0) < 1e-6
    with pytest.raises(ValidationError, match="already normalized"):
        normalize(normed[0], stats)


@settings(max_examples=50, deadline=None)
@given(
    mean=st.floats(-50, 50),
    std=st.floats(0.01, 100),
    seed=st.integers(0, 2**32 - 1),
)
def test_normalize_round_trip(mean, std, seed):
    from specgan.dataset import NormalizationStats

    stats = NormalizationStats(mean, std, 1)
    x = np.random.default_rng(seed).normal(-20, 10, (64, 64))
    back = denormalize(normalize(MelSpectrogram(x, "a"), stats), stats)
    np.testing.assert_allclose(back.values, x, atol=1e-6, rtol=0)
    assert not back.normalized


# -- corpus file -----------------------------------------------------------


def _toy_manifest(tmp_path):
    rng = np.random.default_rng(5)
    for cls, n_frames in (("Hammer", 130), ("Saw", 64), ("Saw", 70)):
        idx = len(list((tmp_path / "data" / cls).glob("*.wav"))) if (tmp_path / "data" / cls).exists() else 0
        write_wav(tmp_path / "data" / cls / f"{idx}.wav", rng.uniform(-0.5, 0.5, samples_for_frames(n_frames)))
    return load_manifest(tmp_path / "data")


def test_corpus_round_trip_and_layout(tmp_path):
    corpus = build_corpus(_toy_manifest(tmp_path), CFG)
    assert corpus.per_class_counts == {"Hammer": 2, "Saw": 2}
    path = corpus.save(tmp_path / "corpus.bin")
    blob = path.read_bytes()
    header = json.loads(blob[: blob.index(b"\n")])
    assert header["shape"] == [4, 64, 64]
    assert header["classes"] == ["Hammer", "Saw"]
    assert header["labels"] == [0, 0, 1, 1]
    assert set(header["normalization"]) == {"mean", "std", "n_samples"}
    assert header["spectrogram_config"]["n_mels"] == 64
    payload = np.frombuffer(blob[blob.index(b"\n") + 1 :], dtype="<f4").reshape(4, 64, 64)
    np.testing.assert_array_equal(payload, corpus.values.astype(np.float32))

    loaded = SpectrogramCorpus.load(path)
    assert loaded.classes == corpus.classes and loaded.normalized
    assert loaded.stats == corpus.stats and loaded.config == CFG
    np.testing.assert_allclose(loaded.values, corpus.values, atol=1e-5)


def test_corpus_file_is_byte_deterministic(tmp_path):
    manifest = _toy_manifest(tmp_path)
    a = build_corpus(manifest, CFG).save(tmp_path / "a.bin").read_bytes()
    b = build_corpus(manifest, CFG).save(tmp_path / "b.bin").read_bytes()
    assert a == b


def test_windowing_conservation(tmp_path):
    manifest = _toy_manifest(tmp_path)
    expected = sum(frame_count(len(c.samples), CFG) // 64 for c in manifest.clips())
    assert len(build_corpus(manifest, CFG)) == expected
