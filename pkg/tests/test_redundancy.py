import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from specgan.errors import ShapeError, ValidationError
from specgan.models import CriticSpec, Critic, Generator, GeneratorSpec, build_baseline_generator, build_generator, save_checkpoint
from specgan.redundancy import (
    ActivationSample,
    CorrelationMatrix,
    analysis_layer,
    capture_activations,
    channel_correlation,
    compare_models,
    probe_batch,
    redundancy_score,
)
from specgan.training import TrainingConfig, init_state, train_step

TINY = GeneratorSpec(latent_dim=8, n_classes=2, embedding_dim=2, start_channels=8, block_channels=(8, 8),
                     se_channels=8, se_reduction=4, output_size=8)


def sample_from(flat, shape=(2, 5)):
    """Wrap (n, C) observations into a (B, H, W, C) sample."""
    flat = np.asarray(flat, dtype=np.float64)
    b = flat.shape[0] // np.prod(shape)
    return ActivationSample("x", flat.reshape(b, *shape, flat.shape[1]))


# -- correlation -----------------------------------------------------------


def test_linear_dependence_cases():
    x = np.random.default_rng(0).normal(size=(100, 1))
    m = channel_correlation(sample_from(np.hstack([x, 2 * x, -x]))).values
    assert m[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert m[0, 2] == pytest.approx(-1.0, abs=1e-12)


def test_independent_channels_are_nearly_uncorrelated():
    x = np.random.default_rng(1).normal(size=(10_000, 4))
    m = channel_correlation(sample_from(x)).values
    off = m[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off) < 0.05)  # about 2 / sqrt(n)


def test_matches_numpy_corrcoef():
    x = np.random.default_rng(2).normal(size=(200, 6)) @ np.random.default_rng(3).normal(size=(6, 6))
    assert np.allclose(channel_correlation(sample_from(x)).values, np.corrcoef(x, rowvar=False), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 8))
def test_matrix_invariants(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, c)) @ rng.normal(size=(c, c))
    m = channel_correlation(sample_from(x, shape=(4, 2))).values
    assert np.max(np.abs(m - m.T)) <= 1e-8
    assert np.allclose(np.diag(m), 1.0, atol=1e-8)
    assert np.all(m >= -1) and np.all(m <= 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 6))
def test_affine_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, c)) @ rng.normal(size=(c, c))
    scale = rng.uniform(0.1, 10, size=c)
    shift = rng.uniform(-5, 5, size=c)
    a = channel_correlation(sample_from(x)).values
    b = channel_correlation(sample_from(x * scale + shift)).values
    assert np.max(np.abs(a - b)) <= 1e-8


def test_constant_channel_gives_zero_not_nan(caplog):
    x = np.random.default_rng(4).normal(size=(50, 3))
    x[:, 1] = 7.0
    with caplog.at_level(logging.WARNING, logger="specgan.redundancy"):
        m = channel_correlation(sample_from(x)).values
    assert np.all(np.isfinite(m))
    assert np.all(m[1, [0, 2]] == 0) and np.all(m[[0, 2], 1] == 0)
    assert "constant" in caplog.text


def test_sample_validation():
    with pytest.raises(ValidationError):
        ActivationSample("x", np.zeros((2, 3, 3, 1)))
    with pytest.raises(ValidationError):
        ActivationSample("x", np.full((2, 3, 3, 2), np.nan))
    with pytest.raises(ShapeError):
        ActivationSample("x", np.zeros((3, 3, 2)))
    with pytest.raises(ValidationError):
        channel_correlation(ActivationSample("x", np.zeros((1, 1, 1, 2))))


# -- score -----------------------------------------------------------------


def test_score_cases():
    assert redundancy_score(np.eye(5)) == 0.0
    assert redundancy_score(np.ones((4, 4))) == 1.0
    m = np.array([[1, 0.5, -0.5], [0.5, 1, 0], [-0.5, 0, 1]])
    assert redundancy_score(CorrelationMatrix(m, "x", 10)) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ShapeError):
        redundancy_score(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 6))
def test_score_monotone_in_abs_offdiagonal(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, c))
    m = channel_correlation(sample_from(x, shape=(1, 5))).values
    bigger = np.sign(m) * np.minimum(1, np.abs(m) * 1.5)
    np.fill_diagonal(bigger, 1)
    s = redundancy_score(m)
    assert 0 <= s <= 1
    assert redundancy_score(bigger) >= s


# -- capture ---------------------------------------------------------------


def test_capture_default_generator_layer_shape():
    torch.manual_seed(0)
    gen = build_generator()
    assert analysis_layer(gen) == "se_stage"
    assert capture_activations(gen, "se_stage", n=64, seed=0).activations.shape == (64, 32, 32, 64)
    assert capture_activations(gen, "se_conv", n=1, seed=0).activations.shape == (1, 32, 32, 64)


def test_capture_is_deterministic_and_does_not_perturb_output():
    torch.manual_seed(1)
    gen = Generator(TINY)
    a = capture_activations(gen, "block2", n=16, seed=3).activations
    b = capture_activations(gen, "block2", n=16, seed=3).activations
    assert np.array_equal(a, b)
    z, labels = probe_batch(TINY.n_classes, TINY.latent_dim, 16, seed=3)
    gen.eval()
    with torch.no_grad():
        plain = gen(z, labels)
        hooked = gen(z, labels, capture={})
    assert torch.equal(plain, hooked)


def test_probe_labels_are_uniform():
    _, labels = probe_batch(6, 4, 256, seed=0)
    counts = np.bincount(labels.numpy(), minlength=6)
    assert counts.max() - counts.min() <= 1


def test_unknown_layer_lists_available():
    gen = Generator(TINY)
    with pytest.raises(ValidationError, match="available layers: block1, block2, se_conv, se_stage"):
        capture_activations(gen, "conv99")


# -- comparison ------------------------------------------------------------


def test_identical_checkpoints_score_equally(tmp_path):
    torch.manual_seed(2)
    path = save_checkpoint(tmp_path / "ck", Generator(TINY))
    res = compare_models(path, path, probe_seed=5, n=32)
    assert res.proposed_score == res.baseline_score and res.lower == "tie"


def test_mismatched_layers_are_rejected():
    torch.manual_seed(3)
    gen = Generator(TINY)
    with pytest.raises(ValidationError, match="layer shapes differ"):
        compare_models(gen, gen, layers=("block1", "block2"), n=4)


def test_toy_trained_models_compare_and_render(tmp_path):
    rng = np.random.default_rng(0)
    real = torch.tensor(rng.normal(size=(32, 1, 8, 8)), dtype=torch.float32)
    labels = torch.tensor(np.arange(32) % 2)
    cfg = TrainingConfig(seed=0)
    models = {}
    for name, use_se in (("proposed", True), ("baseline", False)):
        torch.manual_seed(0)
        spec = GeneratorSpec(**{**TINY.to_dict(), "use_se": use_se, "block_channels": (8, 8)})
        state = init_state(Generator(spec), Critic(CriticSpec(n_classes=2, conv_channels=(8, 16), kernel_size=3, input_size=8)), cfg)
        for _ in range(5):
            train_step(state, real, labels, cfg)
        models[name] = state.generator
    res = compare_models(models["proposed"], models["baseline"], probe_seed=0, n=64, out_dir=tmp_path)
    assert (res.proposed_layer, res.baseline_layer) == ("se_stage", "block2")
    assert 0 <= res.proposed_score <= 1 and 0 <= res.baseline_score <= 1
    for key in ("proposed_png", "baseline_png", "proposed_csv", "baseline_csv"):
        assert res.files[key].stat().st_size > 0
    assert (tmp_path / "redundancy.json").is_file()
    first = (tmp_path / "correlation_proposed.png").read_bytes()
    compare_models(models["proposed"], models["baseline"], probe_seed=0, n=64, out_dir=tmp_path)
    assert (tmp_path / "correlation_proposed.png").read_bytes() == first
    loaded = np.loadtxt(tmp_path / "correlation_proposed.csv", delimiter=",")
    assert redundancy_score(loaded) == pytest.approx(res.proposed_score, abs=1e-12)


def test_default_models_match_at_32x32x64():
    torch.manual_seed(4)
    res = compare_models(build_generator(), build_baseline_generator(), n=4)
    assert res.n_observations == 4 * 32 * 32
