"""Epoch extraction, PCA and per-class Mahalanobis outlier rejection."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

CORRECT = 0
ERROR = 1
LABEL_NAMES = {CORRECT: "correct", ERROR: "error"}

EPOCH_OFFSET = 0.300
EPOCH_LENGTH = 0.450


class DegenerateDataError(ValueError):
    pass


def n_samples(duration: float, sample_rate: float) -> int:
    return int(round(duration * sample_rate))


@dataclass
class EpochSet:
    """A stack of epochs.

    ``data`` has shape ``(n_epochs, n_channels, n_samples)``. ``trial_ids``
    tag every epoch with the trial it was cut from so downstream splits can
    verify they never mix train and test trials.
    """

    data: np.ndarray
    labels: np.ndarray
    onsets: np.ndarray
    participant: np.ndarray
    trial_ids: np.ndarray
    n_skipped: int = 0

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def features(self) -> np.ndarray:
        """Flattened ``(n_epochs, n_channels * n_samples)`` view, channel-major."""
        return self.data.reshape(self.data.shape[0], -1)

    def subset(self, index) -> "EpochSet":
        index = np.asarray(index)
        return EpochSet(self.data[index], self.labels[index], self.onsets[index],
                        self.participant[index], self.trial_ids[index])

    @staticmethod
    def concatenate(sets) -> "EpochSet":
        sets = list(sets)
        return EpochSet(
            np.concatenate([s.data for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.onsets for s in sets]),
            np.concatenate([s.participant for s in sets]),
            np.concatenate([s.trial_ids for s in sets]),
            sum(s.n_skipped for s in sets),
        )


def extract_epochs(signal_ct: np.ndarray, sample_rate: float, onsets, labels,
                   participant="", trial_ids=None, offset: float = EPOCH_OFFSET,
                   length: float = EPOCH_LENGTH) -> EpochSet:
    """Cut ``[onset + offset, onset + offset + length)`` from a
    ``(channels, samples)`` recording.

    Epochs that would run past either end of the recording are skipped and
    counted in ``n_skipped``; a warning is issued when any are dropped.
    """
    signal_ct = np.asarray(signal_ct)
    n_ch, n_total = signal_ct.shape
    width = n_samples(length, sample_rate)
    onsets = np.asarray(onsets, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if trial_ids is None:
        trial_ids = np.arange(len(onsets))
    trial_ids = np.asarray(trial_ids)

    keep, starts = [], []
    for i, onset in enumerate(onsets):
        start = n_samples(onset + offset, sample_rate)
        if start < 0 or start + width > n_total:
            continue
        keep.append(i)
        starts.append(start)
    skipped = len(onsets) - len(keep)
    if skipped:
        warnings.warn(f"{skipped} epoch(s) exceed the recording bounds and were skipped")

    data = np.empty((len(keep), n_ch, width), dtype=float)
    for j, start in enumerate(starts):
        data[j] = signal_ct[:, start:start + width]
    keep = np.asarray(keep, dtype=int)
    return EpochSet(
        data=data,
        labels=labels[keep],
        onsets=onsets[keep],
        participant=np.array([participant] * len(keep), dtype=object),
        trial_ids=trial_ids[keep],
        n_skipped=skipped,
    )


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # (n_features, k), orthonormal columns
    explained_variance: np.ndarray  # (k,)
    explained_variance_ratio: np.ndarray
    total_variance: float = field(default=0.0)

    @property
    def k(self) -> int:
        return self.components.shape[1]

    @property
    def n_features(self) -> int:
        return self.components.shape[0]


def _n_components(ratios: np.ndarray, target: float) -> int:
    if target >= 1.0:
        return len(ratios)
    cumulative = np.cumsum(ratios)
    return int(min(np.searchsorted(cumulative, target) + 1, len(ratios)))


def fit_pca(X: np.ndarray, variance_target: float = 0.99) -> PcaModel:
    """PCA of the rows of ``X`` keeping the fewest components whose
    cumulative explained variance reaches ``variance_target``.

    Works on the thin side of the data: when there are fewer rows than
    columns the decomposition runs on the ``n x n`` Gram matrix of the
    centred data. Each component's sign is fixed so that its largest
    magnitude coordinate is positive.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("fit_pca needs a 2-D array with at least 2 rows")
    if not 0.0 < variance_target <= 1.0:
        raise ValueError(f"variance_target must be in (0, 1], got {variance_target}")
    n, d = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    total = float(np.einsum("ij,ij->", Xc, Xc))
    if total <= 0.0:
        raise DegenerateDataError("all epochs are identical; PCA is undefined")

    if n <= 2000 or d <= n:
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        eigvals = s ** 2
        vecs = vt.T
    else:
        gram = Xc @ Xc.T
        eigvals, u = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1]
        eigvals, u = eigvals[order], u[:, order]
        eigvals = np.clip(eigvals, 0.0, None)
        vecs = None

    # Drop directions that are numerically zero before choosing k.
    tol = eigvals[0] * max(n, d) * np.finfo(float).eps
    rank = int(np.sum(eigvals > tol))
    ratios = eigvals[:rank] / total
    k = _n_components(ratios, variance_target)
    if k < rank and variance_target >= 1.0:
        k = rank

    if vecs is None:
        s = np.sqrt(eigvals[:k])
        components = (Xc.T @ u[:, :k]) / s
    else:
        components = vecs[:, :k].copy()

    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    components *= signs

    var = eigvals[:k] / (n - 1)
    return PcaModel(mean=mean, components=components, explained_variance=var,
                    explained_variance_ratio=ratios[:k], total_variance=total / (n - 1))


def project_pca(model: PcaModel, X: np.ndarray) -> np.ndarray:
    """``components.T @ (x - mean)`` for one flattened epoch or a stack."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1 or (X.ndim == 2 and X.size == model.n_features)
    flat = X.reshape(1, -1) if single else X.reshape(X.shape[0], -1)
    if flat.shape[1] != model.n_features:
        raise ValueError(
            f"epoch has {flat.shape[1]} features, model expects {model.n_features}"
        )
    out = (flat - model.mean) @ model.components
    return out[0] if single else out


def reconstruct_pca(model: PcaModel, scores: np.ndarray) -> np.ndarray:
    return model.mean + np.asarray(scores) @ model.components.T


def rejection_count(fraction: float, class_size: int) -> int:
    # Guard against 0.01 * 2500 landing a hair above 25 in floating point.
    return int(math.ceil(fraction * class_size - 1e-9)) if class_size else 0


def mahalanobis_distances(Z: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance of each row to the row mean.

    The sample covariance gets ``1e-8 * trace / k`` added to its diagonal when
    its condition number exceeds 1e10.
    """
    Z = np.asarray(Z, dtype=float)
    centred = Z - Z.mean(axis=0)
    k = Z.shape[1]
    cov = centred.T @ centred / max(Z.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = eigvals[-1] if eigvals.size else 0.0
    if top <= 0 or eigvals[0] <= 0 or top / eigvals[0] > 1e10:
        eigvals = eigvals + 1e-8 * max(np.trace(cov), np.finfo(float).tiny) / k
    white = (centred @ eigvecs) / np.sqrt(eigvals)
    return np.einsum("ij,ij->i", white, white)


def reject_outliers_mahalanobis(X: np.ndarray, labels, fraction: float = 0.01,
                                variance_target: float = 0.99):
    """Drop the ``ceil(fraction * class size)`` most distant epochs of each class.

    Distances are measured within each class in the space of a PCA fitted on
    all epochs at ``variance_target``. Returns ``(kept, rejected)`` index
    arrays, both sorted.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("outlier rejection needs both classes")
    if not 0.0 <= fraction < 0.5:
        raise ValueError(f"fraction must be in [0, 0.5), got {fraction}")
    if fraction == 0.0:
        return np.arange(len(X)), np.array([], dtype=int)

    scores = project_pca(fit_pca(X, variance_target), X)
    rejected = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        n_drop = rejection_count(fraction, len(members))
        if n_drop == 0:
            continue
        dist = mahalanobis_distances(scores[members])
        # Stable sort on descending distance keeps ties in epoch order.
        order = np.argsort(-dist, kind="stable")
        rejected.extend(members[order[:n_drop]].tolist())
    rejected = np.sort(np.asarray(rejected, dtype=int))
    kept = np.setdiff1d(np.arange(len(X)), rejected)
    return kept, rejected
