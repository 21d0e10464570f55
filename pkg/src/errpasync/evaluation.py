"""Trial-based metrics, threshold personalisation, chance levels and statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .classifier import GenericModel, train_generic, train_shrinkage_lda
from .detector import (batch_window_scores, events_at_threshold,
                       probabilities_from_scores, window_end_times)
from .dsp import FilterSpec, FilterState, apply_causal, design_butterworth_bandpass
from .features import (CORRECT, ERROR, EpochSet, extract_epochs, fit_pca,
                       mahalanobis_distances, project_pca, rejection_count)

TP_WINDOW = 1.5
FAR_INTERVAL = 1.0
GRID_STEP = 0.025
SMOOTHING = 7

TN = "TN"
FALSE_POSITIVE_CORRECT = "FalsePosCorrect"
TP = "TP"
MISSED_OR_EARLY = "MissedOrEarly"


class UndefinedMetricError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class TrialOutcome:
    trial_id: int
    label: str
    verdict: str
    detections: tuple        # detection times relative to onset (error) or start
    edr_hit: bool = False    # at least one detection in (onset, onset + window]


def judge_trial(trial, detections, tp_window: float = TP_WINDOW) -> TrialOutcome:
    """Verdict for one trial from the detection times that fall inside it.

    A correct trial is TN when it has no detection at all. An error trial is
    TP when nothing fires in ``[start, onset)`` and something fires in
    ``(onset, onset + tp_window]``; a detection exactly at the onset counts
    as post-onset.
    """
    det = np.sort(np.asarray(detections, dtype=float))
    if det.size and (det[0] < trial.start or det[-1] > trial.end):
        raise ConsistencyError(
            f"trial {trial.trial_id}: detection outside [{trial.start}, {trial.end}]"
        )
    if not trial.is_error:
        verdict = TN if det.size == 0 else FALSE_POSITIVE_CORRECT
        return TrialOutcome(trial.trial_id, "correct", verdict, tuple(det - trial.start))
    early = bool(np.any(det < trial.onset))
    hit = bool(np.any((det >= trial.onset) & (det <= trial.onset + tp_window)))
    verdict = TP if hit and not early else MISSED_OR_EARLY
    return TrialOutcome(trial.trial_id, "error", verdict, tuple(det - trial.onset), hit)


def far_counts(trial, detections, interval: float = FAR_INTERVAL):
    """``(intervals, contaminated)`` over the trial's false-alarm period.

    The period is the whole correct trial, or the pre-onset part of an error
    trial, cut into ``interval``-long pieces from its start; a trailing piece
    shorter than ``interval`` is discarded.
    """
    stop = trial.onset if trial.is_error else trial.end
    n = int(math.floor((stop - trial.start) / interval + 1e-9))
    if n <= 0:
        return 0, 0
    det = np.asarray(detections, dtype=float)
    det = det[(det >= trial.start) & (det < trial.start + n * interval)]
    slots = np.unique(np.floor((det - trial.start) / interval + 1e-12).astype(int))
    slots = slots[(slots >= 0) & (slots < n)]
    return n, int(slots.size)


@dataclass
class MetricsReport:
    tnr: float
    tpr: float
    edr: float
    far: float
    n_correct: int
    n_error: int
    n_tn: int
    n_tp: int
    n_edr: int
    far_intervals: int
    far_contaminated: int
    tau: float | None = None
    blocks: list | None = None
    chance: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def split_detections(trials, detection_times) -> dict:
    """Map ``trial_id`` to the detection times inside ``[start, end]``."""
    det = np.sort(np.asarray(detection_times, dtype=float))
    out = {}
    for t in trials:
        lo = np.searchsorted(det, t.start, side="left")
        hi = np.searchsorted(det, t.end, side="right")
        out[t.trial_id] = det[lo:hi]
    return out


def session_metrics(trials, detection_times, tau=None, blocks=None,
                    tp_window: float = TP_WINDOW,
                    far_interval: float = FAR_INTERVAL) -> MetricsReport:
    trials = list(trials)
    per_trial = split_detections(trials, detection_times)
    correct = [t for t in trials if not t.is_error]
    error = [t for t in trials if t.is_error]
    if not correct or not error:
        raise UndefinedMetricError("need at least one correct and one error trial")
    n_tn = n_tp = n_edr = 0
    n_int = n_cont = 0
    for t in trials:
        det = per_trial[t.trial_id]
        outcome = judge_trial(t, det, tp_window)
        n_tn += outcome.verdict == TN
        n_tp += outcome.verdict == TP
        n_edr += outcome.edr_hit
        a, b = far_counts(t, det, far_interval)
        n_int += a
        n_cont += b
    far = n_cont / n_int if n_int else float("nan")
    return MetricsReport(
        tnr=n_tn / len(correct), tpr=n_tp / len(error), edr=n_edr / len(error), far=far,
        n_correct=len(correct), n_error=len(error), n_tn=n_tn, n_tp=n_tp, n_edr=n_edr,
        far_intervals=n_int, far_contaminated=n_cont, tau=tau, blocks=blocks,
    )


def virtual_onsets(trials) -> dict:
    """Onset for every correct trial at the mean error-onset latency."""
    trials = list(trials)
    latencies = [t.onset - t.start for t in trials if t.is_error]
    if not latencies:
        raise UndefinedMetricError("virtual onsets need at least one error trial")
    mean = float(np.mean(latencies))
    return {t.trial_id: t.start + mean for t in trials if not t.is_error}


def tau_grid(step: float = GRID_STEP) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, n + 1)


@dataclass
class SweepResult:
    grid: np.ndarray
    tpr: np.ndarray
    tnr: np.ndarray
    edr: np.ndarray
    far: np.ndarray


def _streams_detections(streams, tau, rearm_times=None, single_event_per_run=True):
    parts = [events_at_threshold(s.probabilities, s.times, tau, single_event_per_run,
                                 rearm_times) for s in streams]
    return np.concatenate(parts) if parts else np.array([])


def threshold_sweep(streams, trials, grid=None, tp_window: float = TP_WINDOW,
                    far_interval: float = FAR_INTERVAL) -> SweepResult:
    """TPR/TNR/EDR/FAR for every threshold on the grid.

    ``streams`` is an iterable of ``ProbabilityStream``; detections are
    re-derived from the same stored probabilities at each threshold, with
    the detector re-armed at every trial start as online.
    """
    grid = tau_grid() if grid is None else np.asarray(grid, dtype=float)
    streams = list(streams)
    trials = list(trials)
    starts = [t.start for t in trials]
    rows = []
    for tau in grid:
        m = session_metrics(trials, _streams_detections(streams, tau, starts),
                            tp_window=tp_window, far_interval=far_interval)
        rows.append((m.tpr, m.tnr, m.edr, m.far))
    rows = np.array(rows, dtype=float).reshape(len(grid), 4)
    return SweepResult(grid, rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])


def _exact_smooth(values, window: int):
    half = window // 2
    n = len(values)
    out = []
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out.append(sum(values[i - h:i + h + 1], Fraction(0)) / (2 * h + 1))
    return out


def moving_average(values, window: int = SMOOTHING) -> np.ndarray:
    """Centred moving average; the window shrinks symmetrically at the edges."""
    exact = _exact_smooth([Fraction(float(v)) for v in values], window)
    return np.array([float(v) for v in exact])


def smooth_and_select(tpr, tnr, grid=None, window: int = SMOOTHING):
    """Threshold maximising the product of the smoothed TPR and TNR curves.

    Smoothing and the product are evaluated in exact rational arithmetic so
    that ties are real ties; they resolve to the smallest threshold.
    Returns ``(tau, smooth_tpr, smooth_tnr)``.
    """
    grid = tau_grid() if grid is None else np.asarray(grid, dtype=float)
    if not (len(tpr) == len(tnr) == len(grid)):
        raise ValueError("curves and grid must have the same length")
    s_tpr = _exact_smooth([Fraction(float(v)) for v in tpr], window)
    s_tnr = _exact_smooth([Fraction(float(v)) for v in tnr], window)
    product = [a * b for a, b in zip(s_tpr, s_tnr)]
    best = max(range(len(product)), key=lambda i: (product[i], -i))
    return (float(grid[best]), np.array([float(v) for v in s_tpr]),
            np.array([float(v) for v in s_tnr]))


def adapt_threshold(streams, trials, grid=None, window: int = SMOOTHING):
    """Personalised threshold from all supplied blocks; returns ``(tau, sweep)``."""
    sweep = threshold_sweep(streams, trials, grid)
    tau, _, _ = smooth_and_select(sweep.tpr, sweep.tnr, sweep.grid, window)
    return tau, sweep


def permutation_p_value(observed: float, null) -> float:
    null = np.asarray(null, dtype=float)
    if null.size == 0:
        return float("nan")
    return float((1 + np.sum(null >= observed)) / (1 + null.size))


# --- offline scoring of sessions with arbitrary linear models ---------------

def filtered_blocks(session, blocks, filter_spec) -> dict:
    """Causally filtered ``(channels, samples)`` signal of each block.

    The filter starts from rest at every block start, as the online
    detector does.
    """
    sos = design_butterworth_bandpass(filter_spec)
    out = {}
    for b in blocks:
        raw = session.block_raw(b)
        out[b] = apply_causal(FilterState(sos, raw.shape[0]), raw)
    return out


def linear_streams(session, filtered: dict, weights, biases, window_samples: int,
                   stride_samples: int) -> dict:
    """Probability streams for several linear models: block -> (times, probs[n_win, n_models])."""
    out = {}
    for b, sig in filtered.items():
        scores = batch_window_scores(sig, weights, biases, window_samples, stride_samples)
        times = window_end_times(scores.shape[0], window_samples, stride_samples,
                                 session.sample_rate, session.block_start_time(b))
        out[b] = (times, probabilities_from_scores(scores))
    return out


@dataclass
class _Stream:
    times: np.ndarray
    probabilities: np.ndarray


def _column_streams(streams: dict, j: int, blocks) -> list:
    return [_Stream(streams[b][0], streams[b][1][:, j]) for b in blocks]


# --- label permutation --------------------------------------------------------

def permuted_models(training: EpochSet, n_perm: int, seed: int,
                    variance_target: float = 0.99, outlier_fraction: float = 0.01,
                    subspace_retention: float = 0.9999):
    """Sensor-space weights of generic models trained on shuffled labels.

    Every replicate reruns the complete pipeline (per-class outlier
    rejection, PCA refit, shrinkage LDA) on a fresh permutation of the
    training labels. To keep hundreds of refits affordable the PCA refit is
    solved inside the leading subspace of the whole training corpus that
    retains ``subspace_retention`` of its variance.

    Returns ``(weights, biases)`` with ``weights`` of shape
    ``(n_features, n_perm)``.
    """
    rng = np.random.default_rng(seed)
    X = training.features
    base = fit_pca(X, subspace_retention)
    Z = project_pca(base, X)                       # (n, m)
    cum = np.cumsum(base.explained_variance_ratio)
    k_pre = int(min(np.searchsorted(cum, variance_target) + 1, base.k))
    pre = Z[:, :k_pre]                             # exact preliminary PCA scores
    weights = np.empty((X.shape[1], n_perm))
    biases = np.empty(n_perm)
    for p in range(n_perm):
        labels = rng.permutation(training.labels)
        rejected = []
        for c in (CORRECT, ERROR):
            members = np.flatnonzero(labels == c)
            n_drop = rejection_count(outlier_fraction, len(members))
            if n_drop:
                dist = mahalanobis_distances(pre[members])
                rejected.extend(members[np.argsort(-dist, kind="stable")[:n_drop]])
        kept = np.setdiff1d(np.arange(len(labels)), rejected)
        Zk = Z[kept]
        mu = Zk.mean(axis=0)
        _, s, vt = np.linalg.svd(Zk - mu, full_matrices=False)
        ratios = s ** 2 / np.sum(s ** 2)
        k = int(min(np.searchsorted(np.cumsum(ratios), variance_target) + 1, len(s)))
        V = vt[:k].T                               # subspace coordinates -> components
        feats = (Zk - mu) @ V
        lda = train_shrinkage_lda(feats, labels[kept])
        # sensor weights: components = base.components @ V
        comp_w = V @ lda.weights
        v = base.components @ comp_w
        mean_sensor = base.mean + base.components @ mu
        weights[:, p] = v
        biases[p] = lda.bias - v @ mean_sensor
    return weights, biases


@dataclass
class ChanceResult:
    participant: str
    observed: dict
    chance: dict
    p_values: dict
    null: dict
    taus: list


CHANCE_METRICS = ("tpr", "tnr", "edr", "product")


def _metric_dict(m: MetricsReport) -> dict:
    return {"tpr": m.tpr, "tnr": m.tnr, "edr": m.edr, "far": m.far, "product": m.tpr * m.tnr}


def permutation_chance(session, model: GenericModel, weights, biases, eval_blocks,
                       tau: float | None = None, tuning_blocks=None, grid=None,
                       window: int = SMOOTHING, observed: MetricsReport | None = None
                       ) -> ChanceResult:
    """Chance levels and permutation p-values of one session.

    Each permuted model is run asynchronously over the session's raw data.
    With ``tuning_blocks`` the permuted model gets its own threshold from
    those blocks by the same sweep-and-smooth rule the real model went
    through; otherwise all permuted models use ``tau`` (default: the
    threshold in force during the first evaluation block).
    """
    eval_blocks = list(eval_blocks)
    if tau is None:
        tau = session.block(eval_blocks[0]).tau
    if observed is None:
        observed = session_metrics(session.trials_in(eval_blocks),
                                   np.concatenate([session.detection_times(b) for b in eval_blocks]))
    blocks = sorted(set(eval_blocks) | set(tuning_blocks or []))
    filt = filtered_blocks(session, blocks, model.filter_spec)
    streams = linear_streams(session, filt, weights, biases, model.window_samples,
                             model.stride_samples)
    eval_trials = session.trials_in(eval_blocks)
    tune_trials = session.trials_in(tuning_blocks) if tuning_blocks else None
    null = {k: [] for k in ("tpr", "tnr", "edr", "far", "product")}
    taus = []
    for j in range(weights.shape[1]):
        tau_j = tau
        if tuning_blocks:
            tau_j, _ = adapt_threshold(_column_streams(streams, j, tuning_blocks),
                                       tune_trials, grid, window)
        taus.append(tau_j)
        det = _streams_detections(_column_streams(streams, j, eval_blocks), tau_j,
                                  [t.start for t in eval_trials])
        for k, v in _metric_dict(session_metrics(eval_trials, det)).items():
            null[k].append(v)
    obs = _metric_dict(observed)
    chance = {k: float(np.mean(v)) for k, v in null.items()}
    pvals = {k: permutation_p_value(obs[k], null[k]) for k in CHANCE_METRICS}
    return ChanceResult(str(session.participant.get("participant_id", "")), obs, chance,
                        pvals, {k: np.asarray(v) for k, v in null.items()}, taus)


# --- personalised classifier cross-validation --------------------------------

def session_epochs(session, filtered: dict, offset: float = 0.300,
                   length: float = 0.450) -> EpochSet:
    """Error epochs at the onset, correct epochs at the virtual onset."""
    vo = virtual_onsets(session.trials)
    sets = []
    for b, sig in filtered.items():
        t0 = session.block_start_time(b)
        trials = session.trials_in([b])
        onsets = [(t.onset if t.is_error else vo[t.trial_id]) - t0 for t in trials]
        labels = [ERROR if t.is_error else CORRECT for t in trials]
        ids = [t.trial_id for t in trials]
        ep = extract_epochs(sig, session.sample_rate, onsets, labels,
                            session.participant.get("participant_id", ""), ids,
                            offset=offset, length=length)
        ep.onsets = ep.onsets + t0
        sets.append(ep)
    return EpochSet.concatenate(sets)


def stratified_folds(trial_ids, labels, n_folds: int, rng) -> list:
    """Partition trial ids into ``n_folds`` folds with balanced classes."""
    trial_ids = np.asarray(trial_ids)
    labels = np.asarray(labels)
    folds = [[] for _ in range(n_folds)]
    for c in np.unique(labels):
        ids = rng.permutation(trial_ids[labels == c])
        for f, part in enumerate(np.array_split(ids, n_folds)):
            folds[f].extend(part.tolist())
    return [np.sort(np.asarray(f, dtype=int)) for f in folds]


@dataclass
class CrossValidationResult:
    grid: np.ndarray
    tpr_curves: np.ndarray        # (reps * folds, len(grid))
    tnr_curves: np.ndarray
    tpr: np.ndarray               # averaged curves
    tnr: np.ndarray
    tau: float
    tpr_at_tau: float
    tnr_at_tau: float
    folds: list                   # dicts: rep, fold, train_ids, test_ids
    chance_tpr: np.ndarray | None = None
    chance_tnr: np.ndarray | None = None


def _fold_curves(session, streams, col, test_trials, grid):
    tpr = np.empty(len(grid))
    tnr = np.empty(len(grid))
    blocks = sorted(streams)
    for g, tau in enumerate(grid):
        det = _streams_detections(_column_streams(streams, col, blocks), tau,
                                  [t.start for t in session.trials])
        m = session_metrics(test_trials, det)
        tpr[g], tnr[g] = m.tpr, m.tnr
    return tpr, tnr


def cross_validate(session, reps: int = 10, folds: int = 5, grid=None, seed: int = 0,
                   variance_target: float = 0.99, outlier_fraction: float = 0.01,
                   n_perm: int = 0, filter_spec=None,
                   window: float = 0.450, leap: float = 0.018) -> CrossValidationResult:
    """Repeated stratified k-fold CV of a personalised classifier.

    Folds split trials, never windows: each fold's model sees only epochs of
    its training trials and is then run asynchronously over the recording,
    with only the held-out trials judged. ``n_perm`` label-permuted
    replicates of the whole procedure give chance-level curves.
    """
    grid = tau_grid() if grid is None else np.asarray(grid, dtype=float)
    spec = filter_spec or FilterSpec(sample_rate=session.sample_rate)
    blocks = [b.block for b in session.blocks]
    filt = filtered_blocks(session, blocks, spec)
    epochs = session_epochs(session, filt, length=window)
    trials = {t.trial_id: t for t in session.trials}
    ids = np.array([t.trial_id for t in session.trials])
    labels = np.array([ERROR if t.is_error else CORRECT for t in session.trials])
    if min(np.sum(labels == ERROR), np.sum(labels == CORRECT)) < folds:
        raise ValueError(f"need at least {folds} trials of each class")
    win = int(round(window * session.sample_rate))
    stride = int(round(leap * session.sample_rate))
    rng = np.random.default_rng(seed)

    def run(label_override):
        fold_records, weights, biases = [], [], []
        for r in range(reps):
            for f, test_ids in enumerate(stratified_folds(ids, labels, folds, rng)):
                test_set = set(test_ids.tolist())
                train_idx = np.flatnonzero([tid not in test_set for tid in epochs.trial_ids])
                train = epochs.subset(train_idx)
                leaked = test_set & set(train.trial_ids.tolist())
                if leaked:
                    raise ConsistencyError(f"test trials {sorted(leaked)} leaked into training")
                lab = None if label_override is None else label_override[train_idx]
                m = train_generic(train, variance_target, outlier_fraction,
                                  filter_spec=spec, labels=lab)
                weights.append(m.sensor_weights)
                biases.append(m.sensor_bias)
                fold_records.append({"rep": r, "fold": f,
                                     "train_ids": np.unique(train.trial_ids).tolist(),
                                     "test_ids": test_ids.tolist()})
        streams = linear_streams(session, filt, np.column_stack(weights), np.asarray(biases),
                                 win, stride)
        tprs, tnrs = [], []
        for j, rec in enumerate(fold_records):
            test_trials = [trials[t] for t in rec["test_ids"]]
            a, b = _fold_curves(session, streams, j, test_trials, grid)
            tprs.append(a)
            tnrs.append(b)
        return fold_records, np.array(tprs), np.array(tnrs)

    records, tprs, tnrs = run(None)
    tpr, tnr = tprs.mean(axis=0), tnrs.mean(axis=0)
    tau, _, _ = smooth_and_select(tpr, tnr, grid, window=1)
    g = int(np.argmin(np.abs(grid - tau)))
    chance_tpr = chance_tnr = None
    if n_perm:
        perm_tpr, perm_tnr = [], []
        for _ in range(n_perm):
            shuffled = rng.permutation(epochs.labels)
            _, a, b = run(shuffled)
            perm_tpr.append(a.mean(axis=0))
            perm_tnr.append(b.mean(axis=0))
        chance_tpr, chance_tnr = np.mean(perm_tpr, axis=0), np.mean(perm_tnr, axis=0)
    return CrossValidationResult(grid, tprs, tnrs, tpr, tnr, tau, float(tpr[g]),
                                 float(tnr[g]), records, chance_tpr, chance_tnr)


# --- electrophysiology statistics --------------------------------------------

@dataclass
class ErpStatistics:
    mean_correct: np.ndarray
    mean_error: np.ndarray
    ci_correct: np.ndarray        # (2, channels, samples): lower, upper
    ci_error: np.ndarray
    p_values: np.ndarray
    significant: np.ndarray
    alpha: float


def rank_sum_test(x: np.ndarray, y: np.ndarray, axis: int = 0) -> np.ndarray:
    """Two-sided Wilcoxon rank-sum p-values, normal approximation with tie
    correction, vectorised over the remaining axes. Constant samples give 1."""
    res = stats.mannwhitneyu(x, y, axis=axis, method="asymptotic",
                             use_continuity=True, alternative="two-sided")
    p = np.asarray(res.pvalue, dtype=float)
    return np.where(np.isfinite(p), p, 1.0)


def confidence_interval(data: np.ndarray, z: float = 1.96) -> np.ndarray:
    mean = data.mean(axis=0)
    sem = data.std(axis=0, ddof=1) / np.sqrt(data.shape[0])
    return np.stack([mean - z * sem, mean + z * sem])


def erp_statistics(correct: np.ndarray, error: np.ndarray, alpha: float = 0.01) -> ErpStatistics:
    """Class averages, 95% CIs and a Bonferroni-corrected significance mask.

    Inputs are ``(epochs, channels, samples)``; the correction divides
    ``alpha`` by the number of time points.
    """
    correct = np.asarray(correct, dtype=float)
    error = np.asarray(error, dtype=float)
    if correct.shape[0] < 5 or error.shape[0] < 5:
        raise ValueError("need at least 5 epochs per class")
    p = rank_sum_test(correct, error, axis=0)
    n_times = correct.shape[-1]
    return ErpStatistics(
        mean_correct=correct.mean(axis=0),
        mean_error=error.mean(axis=0),
        ci_correct=confidence_interval(correct),
        ci_error=confidence_interval(error),
        p_values=p,
        significant=p < alpha / n_times,
        alpha=alpha,
    )
