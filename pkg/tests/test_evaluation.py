import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score

from specgan.augment import AugmentationPolicy
from specgan.dataset import SpectrogramCorpus
from specgan.errors import ValidationError
from specgan.evaluation import (
    ClassifierConfig,
    CvReport,
    FeatureExtractor,
    GanAugmenter,
    LeakageError,
    NoAugmentation,
    PolicyAugmenter,
    macro_f1,
    relative_improvement,
    run_cv_experiment,
    stratified_folds,
    train_feature_extractor,
)
from specgan.models import Generator, GeneratorSpec

FAST = ClassifierConfig(epochs=20, learning_rate=1e-3, width=8, batch_size=16)


def level_corpus(n_per_class=(20, 15), size=8, seed=0):
    """Classes differ only by their mean level."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(n_per_class)), n_per_class)
    values = labels[:, None, None] * 3.0 + rng.normal(0, 0.5, (labels.size, size, size))
    ids = [f"clip{i // 3}" for i in range(labels.size)]
    windows = [i % 3 for i in range(labels.size)]
    return SpectrogramCorpus(values, labels, [f"c{k}" for k in range(len(n_per_class))], normalized=True,
                             source_ids=ids, window_index=windows)


# -- macro F1 ----------------------------------------------------------------


def test_macro_f1_hand_cases():
    assert macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0
    assert macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2) == 11 / 15
    assert macro_f1([0, 0, 0], [0, 1, 2], 3) == 1 / 6


def test_macro_f1_validation():
    with pytest.raises(ValidationError):
        macro_f1([], [], 2)
    with pytest.raises(ValidationError):
        macro_f1([0, 3], [0, 1], 2)


@settings(max_examples=60, deadline=None)
@given(data=st.data(), k=st.integers(2, 6), n=st.integers(1, 40))
def test_macro_f1_matches_sklearn_and_relabeling(data, k, n):
    preds = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    truth = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    ours = macro_f1(preds, truth, k)
    ref = f1_score(truth, preds, labels=list(range(k)), average="macro", zero_division=0)
    assert ours == pytest.approx(ref, abs=1e-12)
    perm = np.random.default_rng(n).permutation(k)
    assert macro_f1(perm[preds], perm[truth], k) == pytest.approx(ours, abs=1e-12)


# -- folds -----------------------------------------------------------------


@pytest.mark.parametrize("counts", [(20, 15), (494, 608, 967, 469, 160, 899), (5, 7, 11)])
def test_folds_partition_and_stratify(counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    folds = stratified_folds(labels, 5, seed=0)
    assert len(folds) == 5
    all_val = np.concatenate([va for _, va in folds])
    assert np.array_equal(np.sort(all_val), np.arange(labels.size))
    for i, (tr, va) in enumerate(folds):
        assert np.intersect1d(tr, va).size == 0 and tr.size + va.size == labels.size
        for j, (_, other) in enumerate(folds):
            if i != j:
                assert np.intersect1d(va, other).size == 0
        for k, n in enumerate(counts):
            assert abs(np.sum(labels[va] == k) - n / 5) <= 1


def test_folds_require_every_class_in_every_fold():
    with pytest.raises(ValidationError, match="fewer than 5"):
        stratified_folds(np.array([0] * 10 + [1] * 3), 5, seed=0)


# -- CV harness ------------------------------------------------------------


def test_none_on_separable_corpus_is_near_perfect():
    report = run_cv_experiment(level_corpus(), NoAugmentation(), FAST, seed=0)
    assert len(report.per_fold_f1) == 5
    assert report.mean > 0.99
    assert report.std == pytest.approx(np.std(report.per_fold_f1, ddof=1))


def test_augmentation_doubles_only_training_counts():
    corpus = level_corpus()
    quick = ClassifierConfig(epochs=1, learning_rate=1e-3, width=4)
    plain = run_cv_experiment(corpus, NoAugmentation(), quick, seed=1)
    aug = run_cv_experiment(corpus, PolicyAugmenter(AugmentationPolicy("spec_augment", {"max_freq_width": 2, "max_time_width": 2})), quick, seed=1)
    assert plain.fold_signature == aug.fold_signature
    for before, after in zip(plain.per_fold_train_counts, aug.per_fold_train_counts):
        assert after == {c: 2 * n for c, n in before.items()}
    assert sum(sum(c.values()) for c in plain.per_fold_train_counts) == 4 * len(corpus)


def test_gan_augmenter_samples_never_reach_validation():
    torch.manual_seed(0)
    spec = GeneratorSpec(latent_dim=4, n_classes=2, embedding_dim=2, start_channels=8, block_channels=(8, 8),
                         se_channels=8, se_reduction=4, output_size=8)
    quick = ClassifierConfig(epochs=1, learning_rate=1e-3, width=4)
    report = run_cv_experiment(level_corpus(), GanAugmenter(Generator(spec), "proposed"), quick, seed=0)
    assert report.augmentation_name == "proposed"
    assert all(sum(c.values()) == 2 * 28 for c in report.per_fold_train_counts)


class LeakyAugmenter:
    """Deliberately wrong: 'augments' with copies of every corpus item, validation included."""

    name = "leaky"

    def __init__(self, corpus):
        self.corpus = corpus

    def augment(self, train, seed):
        leaked = self.corpus.subset(np.arange(len(self.corpus))[: len(train)])
        leaked.labels = train.labels.copy()
        leaked.origins = ["leaky"] * len(train)
        return leaked


def test_leaking_augmenter_trips_the_assertion():
    corpus = level_corpus()
    with pytest.raises(LeakageError):
        run_cv_experiment(corpus, LeakyAugmenter(corpus), ClassifierConfig(epochs=1, width=4), seed=0)


def test_defaults_are_the_published_classifier_settings():
    cfg = ClassifierConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.n_folds) == (20, 1e-5, 0.9, 0.99, 5)


# -- relative improvement --------------------------------------------------


def _report(name, mean, sig="folds"):
    return CvReport(name, [mean] * 5, sig)


def test_relative_improvement_percentage_points():
    none = _report("none", 0.939)
    assert relative_improvement(_report("proposed", 0.9674), none) == pytest.approx(2.84, abs=1e-9)
    assert relative_improvement(_report("cwgan", 0.956), none) == pytest.approx(1.7, abs=1e-9)
    assert relative_improvement(none, none) == 0.0
    with pytest.raises(ValidationError):
        relative_improvement(_report("x", 0.9, sig="other"), none)


def test_report_round_trip():
    r = CvReport("none", [0.9, 0.8, 0.85, 0.95, 0.9], "abc", fid=None)
    back = CvReport.from_dict(r.to_dict())
    assert back.mean == pytest.approx(r.mean) and back.std == pytest.approx(r.std)


# -- feature extractor -----------------------------------------------------


def test_feature_extractor_trains_and_is_frozen(tmp_path):
    corpus = level_corpus((30, 30))
    history = []
    fx = train_feature_extractor(corpus, FAST, history=history)
    from specgan.evaluation import predict

    acc = np.mean(predict(fx.model, corpus.values) == corpus.labels)
    assert acc > 0.95
    feats = fx(corpus.values)
    assert feats.shape == (60, fx.feature_dim) and fx.feature_dim == 8 * FAST.width
    assert np.array_equal(feats, fx(corpus.values))
    assert not any(p.requires_grad for p in fx.model.parameters())
    again = FeatureExtractor.load(fx.save(tmp_path / "fx"))
    assert np.array_equal(again(corpus.values), feats)


def test_feature_extractor_needs_two_classes():
    corpus = level_corpus((10, 10)).subset(np.arange(10))
    with pytest.raises(ValidationError):
        train_feature_extractor(corpus, FAST)
