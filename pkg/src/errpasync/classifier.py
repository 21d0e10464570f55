"""Shrinkage LDA with a logistic probability head, and the generic model."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dsp import FilterSpec, design_butterworth_bandpass
from .features import (CORRECT, ERROR, EpochSet, PcaModel, fit_pca, n_samples,
                       project_pca, reject_outliers_mahalanobis)


class TrainingError(ValueError):
    pass


class DegeneratePatternError(ValueError):
    pass


@dataclass(frozen=True)
class LdaModel:
    """Linear score ``w @ x + b``; positive scores favour the error class."""

    weights: np.ndarray
    bias: float
    shrinkage: float
    classes: tuple = ("correct", "error")

    def score(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.weights + self.bias


def shrinkage_intensity(Z: np.ndarray) -> float:
    """Analytic shrinkage towards ``nu * I`` for already-centred rows ``Z``.

    Ledoit-Wolf style estimate in the form used for shrinkage LDA in BCI
    work: the summed variances of the entries of the sample covariance
    divided by the squared distance of the covariance from its scaled
    identity target. Clipped to ``[0, 1]``.
    """
    n, d = Z.shape
    if n < 2:
        return 1.0
    S = Z.T @ Z / (n - 1)
    nu = np.trace(S) / d
    # sum_ij of the unbiased variance over rows of z_ki * z_kj
    row_sq = np.einsum("ij,ij->i", Z, Z)
    scatter_sq = np.sum((S * (n - 1)) ** 2)
    var_sum = (np.sum(row_sq ** 2) - scatter_sq / n) / (n - 1)
    target_dist = np.sum(S ** 2) - 2 * nu * np.trace(S) + d * nu ** 2
    if target_dist <= 0:
        return 1.0
    gamma = n / (n - 1) ** 2 * var_sum / target_dist
    return float(np.clip(gamma, 0.0, 1.0))


def train_shrinkage_lda(X: np.ndarray, y, shrinkage: float | None = None) -> LdaModel:
    """Two-class shrinkage LDA.

    ``w = ((1 - g) * S + g * nu * I)^-1 (mu_error - mu_correct)`` where ``S``
    is the pooled within-class covariance and ``nu = trace(S) / k``. The bias
    puts the zero of the score at the midpoint of the class means.
    ``shrinkage=None`` selects ``g`` analytically.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] <= 2:
        raise TrainingError("need a 2-D feature matrix with more than 2 rows")
    err, cor = X[y == ERROR], X[y == CORRECT]
    if len(err) == 0 or len(cor) == 0:
        raise TrainingError("both classes must be present")
    mu_err, mu_cor = err.mean(axis=0), cor.mean(axis=0)
    Z = np.vstack([err - mu_err, cor - mu_cor])
    n, d = Z.shape
    S = Z.T @ Z / (n - 2)
    gamma = shrinkage_intensity(Z) if shrinkage is None else float(shrinkage)
    if not 0.0 <= gamma <= 1.0:
        raise TrainingError(f"shrinkage must lie in [0, 1], got {gamma}")
    nu = np.trace(S) / d
    C = (1.0 - gamma) * S
    C[np.diag_indices(d)] += gamma * nu
    w = np.linalg.solve(C, mu_err - mu_cor)
    b = -float(w @ (0.5 * (mu_err + mu_cor)))
    if not np.all(np.isfinite(w)):
        raise TrainingError("non-finite LDA weights")
    return LdaModel(weights=w, bias=b, shrinkage=gamma)


def logistic_probability(score):
    """``(p_correct, p_error)`` from an LDA score; two-class softmax."""
    p_err = expit(score)
    return 1.0 - p_err, p_err


def activation_pattern(lda: LdaModel, features: np.ndarray, pca: PcaModel | None = None,
                       shape: tuple | None = None):
    """Forward-model pattern ``cov(X) w / (w' cov(X) w)``.

    With ``pca`` the pattern is mapped back to sensor space and reshaped to
    ``shape`` (channels, samples); otherwise the second return value is None.
    """
    X = np.asarray(features, dtype=float)
    Xc = X - X.mean(axis=0)
    cov_w = Xc.T @ (Xc @ lda.weights) / (X.shape[0] - 1)
    denom = float(lda.weights @ cov_w)
    if not denom > 0:
        raise DegeneratePatternError("w' cov(X) w is not positive")
    pattern = cov_w / denom
    if pca is None:
        return pattern, None
    sensor = pca.components @ pattern
    return pattern, sensor.reshape(shape) if shape is not None else sensor


@dataclass(frozen=True)
class GenericModel:
    """Filter, PCA and LDA chained into one window classifier."""

    pca: PcaModel
    lda: LdaModel
    threshold: float = 0.7
    filter_spec: FilterSpec = field(default_factory=FilterSpec)
    n_channels: int = 61
    window: float = 0.450
    leap: float = 0.018
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.pca.k != len(self.lda.weights):
            raise ValueError("PCA and LDA dimensions disagree")
        if self.pca.n_features != self.n_channels * self.window_samples:
            raise ValueError("PCA feature length does not match channels x window")
        # Fold PCA and LDA into one sensor-space weight vector. The detector
        # reads windows time-major, so keep a copy in that layout too.
        v = self.pca.components @ self.lda.weights
        object.__setattr__(self, "_sensor_weights", v)
        object.__setattr__(self, "_sensor_bias", float(self.lda.bias - v @ self.pca.mean))
        tm = np.ascontiguousarray(v.reshape(self.n_channels, self.window_samples).T).ravel()
        object.__setattr__(self, "_time_major_weights", tm)

    @property
    def sample_rate(self) -> float:
        return self.filter_spec.sample_rate

    @property
    def window_samples(self) -> int:
        return n_samples(self.window, self.filter_spec.sample_rate)

    @property
    def stride_samples(self) -> int:
        return n_samples(self.leap, self.filter_spec.sample_rate)

    @property
    def sos(self) -> np.ndarray:
        return design_butterworth_bandpass(self.filter_spec)

    @property
    def sensor_weights(self) -> np.ndarray:
        return self._sensor_weights

    @property
    def sensor_bias(self) -> float:
        return self._sensor_bias

    @property
    def time_major_weights(self) -> np.ndarray:
        return self._time_major_weights

    def with_threshold(self, tau: float) -> "GenericModel":
        return replace(self, threshold=float(tau))

    def score(self, window: np.ndarray) -> float:
        window = np.asarray(window, dtype=float)
        expected = (self.n_channels, self.window_samples)
        if window.shape != expected:
            raise ValueError(f"window must have shape {expected}, got {window.shape}")
        z = project_pca(self.pca, window.ravel())
        return float(self.lda.score(z))

    def window_score_time_major(self, flat_window: np.ndarray) -> float:
        """Score of a flattened ``(samples, channels)`` window."""
        return float(np.dot(flat_window, self._time_major_weights) + self._sensor_bias)

    def window_probability(self, flat_window: np.ndarray) -> float:
        return float(expit(self.window_score_time_major(flat_window)))


def predict_probability(model: GenericModel, window: np.ndarray):
    """``(p_correct, p_error)`` for a filtered ``(channels, samples)`` window."""
    return logistic_probability(model.score(window))


def train_generic(epochs: EpochSet, variance_target: float = 0.99,
                  outlier_fraction: float = 0.01, shrinkage: float | None = None,
                  threshold: float = 0.7, filter_spec: FilterSpec | None = None,
                  labels=None, info: dict | None = None) -> GenericModel:
    """Outlier rejection, PCA refit and shrinkage LDA on filtered epochs.

    ``labels`` overrides ``epochs.labels`` (used for label permutation).
    """
    labels = epochs.labels if labels is None else np.asarray(labels)
    X = epochs.features
    kept, rejected = reject_outliers_mahalanobis(X, labels, outlier_fraction, variance_target)
    Xk, yk = X[kept], labels[kept]
    pca = fit_pca(Xk, variance_target)
    lda = train_shrinkage_lda(project_pca(pca, Xk), yk, shrinkage)
    n_ch = epochs.data.shape[1]
    summary = {
        "n_epochs": int(len(X)),
        "n_rejected": int(len(rejected)),
        "n_kept_correct": int(np.sum(yk == CORRECT)),
        "n_kept_error": int(np.sum(yk == ERROR)),
        "pca_components": int(pca.k),
        "shrinkage": float(lda.shrinkage),
    }
    if info:
        summary.update(info)
    spec = filter_spec or FilterSpec()
    return GenericModel(pca=pca, lda=lda, threshold=threshold, filter_spec=spec,
                        n_channels=n_ch, window=epochs.data.shape[2] / spec.sample_rate,
                        info=summary)
