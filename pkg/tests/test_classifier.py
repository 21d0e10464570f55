import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errpasync.classifier import (DegeneratePatternError, GenericModel, LdaModel,
                                  TrainingError, activation_pattern, logistic_probability,
                                  predict_probability, shrinkage_intensity, train_shrinkage_lda)
from errpasync.features import CORRECT, ERROR, fit_pca, project_pca


def two_gaussians(n=2000, d=10, seed=0, shift=1.0):
    rng = np.random.default_rng(seed)
    y = np.repeat([CORRECT, ERROR], n // 2)
    X = rng.standard_normal((n, d))
    X[:, 0] += np.where(y == ERROR, shift, -shift)
    return X, y


def angle_deg(a, b):
    c = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


def brute_force_shrinkage(Z):
    """Per-entry variance of z_k z_k' over the summed squared off-target distance."""
    n, d = Z.shape
    outer = np.array([np.outer(z, z) for z in Z])
    S = outer.mean(axis=0) * n / (n - 1)
    nu = np.trace(S) / d
    var = outer.var(axis=0, ddof=1)
    gamma = np.sum(var) * n / (n - 1) ** 2 / np.sum((S - nu * np.eye(d)) ** 2)
    return float(np.clip(gamma, 0, 1))


def small_generic(seed=0, n_channels=2, window=0.45):
    rng = np.random.default_rng(seed)
    n_feat = n_channels * int(round(window * 500))
    X = rng.standard_normal((60, n_feat))
    y = np.repeat([CORRECT, ERROR], 30)
    X[y == ERROR, :5] += 1.0
    pca = fit_pca(X, 0.99)
    lda = train_shrinkage_lda(project_pca(pca, X), y)
    return GenericModel(pca=pca, lda=lda, n_channels=n_channels, window=window)


# --- LDA ----------------------------------------------------------------------

def test_direction_matches_generating_discriminant():
    X, y = two_gaussians()
    w = train_shrinkage_lda(X, y).weights
    # closed form on the generating law: identity covariance, mean difference 2 e1
    oracle = np.linalg.solve(np.eye(10), 2 * np.eye(10)[0])
    assert angle_deg(w, oracle) < 5.0


def test_swapped_classes_negate_weights_and_bias():
    X, y = two_gaussians(seed=1)
    a = train_shrinkage_lda(X, y)
    b = train_shrinkage_lda(X, np.where(y == ERROR, CORRECT, ERROR))
    assert np.array_equal(b.weights, -a.weights)
    assert b.bias == -a.bias


def test_full_shrinkage_gives_mean_difference():
    X, y = two_gaussians(n=300, seed=2)
    X = X @ np.random.default_rng(3).standard_normal((10, 10))
    w = train_shrinkage_lda(X, y, shrinkage=1.0).weights
    diff = X[y == ERROR].mean(axis=0) - X[y == CORRECT].mean(axis=0)
    u, v = w / np.linalg.norm(w), diff / np.linalg.norm(diff)
    # angle from the orthogonal residual; arccos is ill-conditioned near 0
    residual = np.linalg.norm(u - (u @ v) * v)
    assert np.arctan2(residual, u @ v) < 1e-9


def test_bias_zero_at_class_midpoint():
    X, y = two_gaussians(n=400, seed=4)
    m = train_shrinkage_lda(X, y)
    mid = 0.5 * (X[y == ERROR].mean(axis=0) + X[y == CORRECT].mean(axis=0))
    assert abs(m.score(mid)) < 1e-9


def test_zero_shrinkage_matches_plain_lda():
    X, y = two_gaussians(n=600, d=6, seed=5)
    X = X @ np.random.default_rng(6).standard_normal((6, 6))
    w = train_shrinkage_lda(X, y, shrinkage=0.0).weights
    x0, x1 = X[y == CORRECT], X[y == ERROR]
    pooled = ((len(x0) - 1) * np.cov(x0, rowvar=False)
              + (len(x1) - 1) * np.cov(x1, rowvar=False)) / (len(X) - 2)
    ref = np.linalg.inv(pooled) @ (x1.mean(axis=0) - x0.mean(axis=0))
    assert np.allclose(w, ref, rtol=1e-6, atol=0)


def test_shrinkage_intensity_matches_entrywise_variance_estimate():
    rng = np.random.default_rng(7)
    Z = rng.standard_normal((40, 6)) @ rng.standard_normal((6, 6))
    Z -= Z.mean(axis=0)
    assert shrinkage_intensity(Z) == pytest.approx(brute_force_shrinkage(Z), rel=1e-9)


def test_shrinkage_in_unit_interval_for_high_dimension():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((50, 200))
    y = np.repeat([CORRECT, ERROR], 25)
    g = train_shrinkage_lda(X, y).shrinkage
    assert 0.0 <= g <= 1.0 and g > 0.5


def test_single_class_is_rejected():
    X = np.random.default_rng(9).standard_normal((20, 3))
    with pytest.raises(TrainingError):
        train_shrinkage_lda(X, np.zeros(20, dtype=int))


def test_invalid_shrinkage_is_rejected():
    X, y = two_gaussians(n=40, d=3)
    with pytest.raises(TrainingError):
        train_shrinkage_lda(X, y, shrinkage=1.5)


def test_training_is_deterministic():
    X, y = two_gaussians(n=300, seed=10)
    a, b = train_shrinkage_lda(X, y), train_shrinkage_lda(X.copy(), y.copy())
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
    assert a.shrinkage == b.shrinkage


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_translation_shifts_bias_only(seed):
    X, y = two_gaussians(n=200, d=5, seed=seed)
    c = np.random.default_rng(seed + 1).uniform(-50, 50, 5)
    a = train_shrinkage_lda(X, y)
    b = train_shrinkage_lda(X + c, y)
    assert np.allclose(b.weights, a.weights, rtol=0, atol=1e-9)
    assert b.bias == pytest.approx(a.bias - a.weights @ c, abs=1e-9)


# --- probabilities --------------------------------------------------------------

def test_zero_score_is_even_odds():
    assert logistic_probability(0.0) == (0.5, 0.5)


def test_large_score_saturates():
    assert logistic_probability(50.0)[1] > 1 - 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(-700, 700))
def test_probabilities_sum_to_one(s):
    pc, pe = logistic_probability(s)
    assert pc + pe == pytest.approx(1.0, abs=1e-15)


def test_probability_monotone_on_random_windows():
    model = small_generic()
    rng = np.random.default_rng(11)
    windows = rng.standard_normal((1000, 2, 225))
    s = np.array([model.score(w) for w in windows])
    p = np.array([predict_probability(model, w)[1] for w in windows])
    order = np.argsort(s)
    assert np.all(np.diff(p[order]) >= 0)
    strict = np.diff(s[order]) > 1e-6
    assert np.all(np.diff(p[order])[strict] > 0)


def test_window_of_zero_score():
    model = small_generic()
    # along the sensor weight direction, pick the point with score 0
    v = model.sensor_weights
    x = -model.sensor_bias * v / (v @ v)
    pc, pe = predict_probability(model, x.reshape(2, 225))
    assert pc == pytest.approx(0.5, abs=1e-9) and pe == pytest.approx(0.5, abs=1e-9)


def test_window_shape_mismatch_raises():
    with pytest.raises(ValueError):
        predict_probability(small_generic(), np.zeros((3, 225)))


def test_time_major_score_equals_channel_major_score():
    model = small_generic()
    w = np.random.default_rng(12).standard_normal((2, 225))
    assert model.window_score_time_major(w.T.ravel()) == pytest.approx(model.score(w),
                                                                        rel=1e-9, abs=1e-9)


# --- activation pattern ---------------------------------------------------------

def test_pattern_parallel_to_weights_for_whitened_features():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((500, 4))
    X = (X - X.mean(axis=0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(X, rowvar=False))).T
    lda = LdaModel(weights=np.array([1.0, -2.0, 0.5, 3.0]), bias=0.0, shrinkage=0.0)
    a, _ = activation_pattern(lda, X)
    assert angle_deg(a, lda.weights) < 1e-6


def planted_epochs(seed=14, n=400, ch=6, t=30, planted=(2,)):
    rng = np.random.default_rng(seed)
    y = np.repeat([CORRECT, ERROR], n // 2)
    data = rng.standard_normal((n, ch, t))
    shape = np.sin(np.linspace(0, np.pi, t))
    for c in planted:
        data[y == ERROR, c] += 1.5 * shape
    return data, y


def test_pattern_concentrates_on_planted_channel():
    data, y = planted_epochs()
    X = data.reshape(len(data), -1)
    pca = fit_pca(X, 0.99)
    Z = project_pca(pca, X)
    lda = train_shrinkage_lda(Z, y)
    _, sensor = activation_pattern(lda, Z, pca, data.shape[1:])
    energy = np.sum(sensor ** 2, axis=1)
    # oracle: the generating template lives on channel 2 only
    assert energy[2] / energy.sum() >= 0.8


def test_pattern_argmax_invariant_under_scaling():
    data, y = planted_epochs(seed=15)
    X = data.reshape(len(data), -1)

    def argmax_map(Xs):
        pca = fit_pca(Xs, 0.99)
        Z = project_pca(pca, Xs)
        _, sensor = activation_pattern(train_shrinkage_lda(Z, y), Z, pca, data.shape[1:])
        return np.unravel_index(np.argmax(np.abs(sensor)), sensor.shape)

    assert argmax_map(X) == argmax_map(2 * X)


def test_degenerate_pattern_raises():
    X = np.zeros((10, 3))
    X[:, 0] = np.arange(10)
    lda = LdaModel(weights=np.array([0.0, 1.0, 0.0]), bias=0.0, shrinkage=0.0)
    with pytest.raises(DegeneratePatternError):
        activation_pattern(lda, X)


def test_generic_model_rejects_dimension_mismatch():
    model = small_generic()
    with pytest.raises(ValueError):
        GenericModel(pca=model.pca, lda=model.lda, n_channels=3)
