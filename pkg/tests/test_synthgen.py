import numpy as np
import pytest

from dpmtl.data import validate_dataset
from dpmtl.synthgen import GenConfig, bayes_optimal_metrics, generate_dataset, true_probabilities


def test_shapes_and_validity():
    g = GenConfig(num_users=30, num_items=7, options=(2, 3, 4, 5, 2, 3, 4), dim=3, seed=1)
    data, truth = generate_dataset(g)
    assert len(data) == 30 * 7 and validate_dataset(data) == []
    assert truth.theta.shape == (30, 3)
    assert truth.params["option"].shape == (sum(g.option_counts()), 3)
    assert set(data.scores) == set(range(30))


def test_seeded_and_reproducible():
    a, _ = generate_dataset(GenConfig(seed=4, num_users=20, num_items=5))
    b, _ = generate_dataset(GenConfig(seed=4, num_users=20, num_items=5))
    c, _ = generate_dataset(GenConfig(seed=5, num_users=20, num_items=5))
    assert np.array_equal(a.chosen, b.chosen) and a.scores == b.scores
    assert not np.array_equal(a.chosen, c.chosen)


def test_density_thins_interactions():
    d, _ = generate_dataset(GenConfig(num_users=100, num_items=20, density=0.3, seed=2))
    assert 0.25 < 1 - d.sparsity < 0.35


def test_empirical_choice_frequencies_match_truth():
    data, truth = generate_dataset(GenConfig(num_users=4000, num_items=1, options=3, dim=1, seed=0))
    p = true_probabilities(data, truth)
    freq = np.bincount(data.chosen, minlength=3) / len(data)
    np.testing.assert_allclose(freq, p.mean(axis=0), atol=0.02)


def test_scores_are_linear_in_theta_without_noise():
    data, truth = generate_dataset(GenConfig(num_users=50, num_items=3, dim=2, seed=3))
    s = np.array([data.scores[u] for u in range(50)])
    np.testing.assert_allclose(s, truth.theta @ truth.score_weights + 500)


def test_bayes_metrics_beat_chance():
    data, truth = generate_dataset(GenConfig(num_users=300, num_items=20, seed=6))
    auc, acc = bayes_optimal_metrics(data, truth)
    assert auc > 0.7 and acc > 0.3


def test_config_errors():
    with pytest.raises(ValueError):
        GenConfig(options=1)
    with pytest.raises(ValueError):
        GenConfig(temperature=0)
    with pytest.raises(ValueError):
        GenConfig(dim=2, score_weights=(1.0,))
