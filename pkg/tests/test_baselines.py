"""KDE and Isolation Forest baselines."""

import math

import numpy as np
import pytest

from gradshift.baselines import (
    IsolationForest, KernelDensityModel, anomaly_score, average_path_length,
    corpus_latents, harmonic, scott_bandwidth,
)


# ----------------------------------------------------------------------
# KDE
# ----------------------------------------------------------------------

def test_kde_single_point_closed_form():
    # querying at the lone training point with h=1, d=1: -log N(0;0,1)
    m = KernelDensityModel(np.zeros((1, 1)), bandwidth=1.0)
    assert m.score([0.0]) == pytest.approx(0.5 * math.log(2 * math.pi),
                                           abs=1e-12)


def test_kde_far_query_scores_higher():
    rng = np.random.default_rng(0)
    train = rng.normal(size=(50, 3))
    m = KernelDensityModel(train)
    at_train = max(m.score(row) for row in train)
    assert m.score(np.full(3, 40.0)) > at_train


def test_kde_duplicated_training_set_invariant():
    rng = np.random.default_rng(1)
    train = rng.normal(size=(20, 2))
    m1 = KernelDensityModel(train, bandwidth=0.7)
    m2 = KernelDensityModel(np.vstack([train, train]), bandwidth=0.7)
    q = rng.normal(size=(5, 2))
    np.testing.assert_allclose(m1.score_many(q), m2.score_many(q), atol=1e-12)


def test_kde_permutation_invariant_and_continuous():
    rng = np.random.default_rng(2)
    train = rng.normal(size=(30, 2))
    m1 = KernelDensityModel(train, bandwidth=0.5)
    m2 = KernelDensityModel(train[::-1].copy(), bandwidth=0.5)
    q = rng.normal(size=2)
    assert m1.score(q) == pytest.approx(m2.score(q), abs=1e-12)
    eps = 1e-6
    assert abs(m1.score(q + eps) - m1.score(q)) < 1e-3


def test_kde_bandwidth_validation():
    with pytest.raises(ValueError, match="bandwidth"):
        KernelDensityModel(np.zeros((3, 2)), bandwidth=0.0)
    with pytest.raises(ValueError, match=">= 2"):
        KernelDensityModel(np.zeros((1, 2)))  # estimation needs 2 rows
    with pytest.raises(ValueError, match="constant"):
        KernelDensityModel(np.zeros((5, 2)))


def test_scott_bandwidth_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 4)) * np.array([1.0, 2.0, 0.5, 1.5])
    h = scott_bandwidth(x)
    stds = x.std(axis=0, ddof=1)
    expected = 100 ** (-1 / 8) * np.exp(np.log(stds).mean())
    assert h == pytest.approx(expected, rel=1e-12)


def test_kde_score_many_matches_loop():
    rng = np.random.default_rng(4)
    train = rng.normal(size=(40, 3))
    m = KernelDensityModel(train)
    q = rng.normal(size=(7, 3))
    np.testing.assert_allclose(m.score_many(q, chunk=3),
                               [m.score(z) for z in q], atol=1e-12)


# ----------------------------------------------------------------------
# isolation forest
# ----------------------------------------------------------------------

def test_harmonic_and_c():
    assert harmonic(4) == pytest.approx(1 + 0.5 + 1 / 3 + 0.25)
    assert average_path_length(1) == 0.0
    assert average_path_length(2) == pytest.approx(2 * 1.0 - 1.0)
    psi = 256
    assert average_path_length(psi) == pytest.approx(
        2 * harmonic(psi - 1) - 2 * (psi - 1) / psi)


def test_score_half_at_average_path():
    psi = 128
    assert anomaly_score(average_path_length(psi), psi) == pytest.approx(0.5)


def test_isolated_outlier_scores_above_cluster():
    rng = np.random.default_rng(5)
    cluster = rng.normal(scale=0.3, size=(200, 2))
    data = np.vstack([cluster, [[9.0, 9.0]]])
    forest = IsolationForest(data, n_trees=100, subsample=64, seed=0)
    outlier = forest.score([9.0, 9.0])
    cluster_median = np.median(forest.score_many(cluster[:50]))
    assert outlier > cluster_median


def test_forest_same_seed_identical():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(100, 3))
    q = rng.normal(size=(10, 3))
    f1 = IsolationForest(data, n_trees=25, subsample=32, seed=9)
    f2 = IsolationForest(data, n_trees=25, subsample=32, seed=9)
    np.testing.assert_array_equal(f1.score_many(q), f2.score_many(q))


def test_forest_scores_in_unit_interval():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(80, 2))
    forest = IsolationForest(data, n_trees=50, subsample=32, seed=1)
    scores = forest.score_many(rng.normal(size=(30, 2)) * 3)
    assert np.all(scores > 0) and np.all(scores <= 1)


def test_forest_handles_constant_feature():
    rng = np.random.default_rng(8)
    data = np.column_stack([rng.normal(size=60), np.zeros(60)])
    forest = IsolationForest(data, n_trees=20, subsample=16, seed=2)
    assert 0 < forest.score([0.0, 0.0]) <= 1


def test_forest_more_trees_less_variance():
    rng = np.random.default_rng(9)
    data = rng.normal(size=(300, 2))
    q = rng.normal(size=2)

    def spread(n_trees):
        scores = [IsolationForest(data, n_trees=n_trees, subsample=64,
                                  seed=s).score(q) for s in range(8)]
        return np.var(scores)

    assert spread(64) < spread(4)


def test_forest_needs_two_rows():
    with pytest.raises(ValueError, match="subsample"):
        IsolationForest(np.zeros((1, 2)))


# ----------------------------------------------------------------------
# latents
# ----------------------------------------------------------------------

def test_corpus_latents_shape():
    from gradshift.models import Encoder, EncoderConfig
    from gradshift.trajectory import Trajectory

    enc = Encoder.init(EncoderConfig(n_past=6, hidden=(8,), latent=5), 0)
    rng = np.random.default_rng(10)
    corpus = [Trajectory(np.cumsum(rng.normal(size=(9, 2)), axis=0), 10.0)
              for _ in range(4)]
    z = corpus_latents(enc, corpus, n_past=6)
    assert z.shape == (4, 5)
