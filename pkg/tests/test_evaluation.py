import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erfc

from errpasync.evaluation import (FALSE_POSITIVE_CORRECT, MISSED_OR_EARLY, TN, TP,
                                  ConsistencyError, UndefinedMetricError, confidence_interval,
                                  cross_validate, erp_statistics, far_counts, judge_trial,
                                  moving_average, permutation_p_value, rank_sum_test,
                                  session_metrics, smooth_and_select, stratified_folds, tau_grid,
                                  threshold_sweep, virtual_onsets)
from errpasync.session import ProbabilityStream, Trial


def err(start=0.0, onset=1.3, end=6.0, tid=0):
    return Trial(tid, 1, "error", "left", start, end, distance=8 * (onset - start),
                 marker=onset - 0.225, onset=onset)


def cor(start=0.0, end=2.0, tid=0):
    return Trial(tid, 1, "correct", "left", start, end)


# --- trial verdicts -----------------------------------------------------------------

def test_post_onset_detection_is_tp():
    assert judge_trial(err(), [1.7]).verdict == TP


def test_pre_onset_detection_spoils_tp():
    o = judge_trial(err(), [1.1, 1.7])
    assert o.verdict == MISSED_OR_EARLY and o.edr_hit


def test_late_detection_is_not_tp():
    o = judge_trial(err(), [1.3 + 1.6])
    assert o.verdict == MISSED_OR_EARLY and not o.edr_hit


def test_window_edges():
    assert judge_trial(err(), [1.3]).verdict == TP
    assert judge_trial(err(), [2.8]).verdict == TP


def test_correct_verdicts():
    assert judge_trial(cor(), []).verdict == TN
    assert judge_trial(cor(), [0.5]).verdict == FALSE_POSITIVE_CORRECT


def test_detection_outside_trial_raises():
    with pytest.raises(ConsistencyError):
        judge_trial(cor(), [2.5])


# --- session metrics --------------------------------------------------------------

def test_tnr_from_three_false_positive_trials():
    trials = [cor(3 * i, 3 * i + 2, i) for i in range(21)] + [err(100, 101.3, 106, 99)]
    det = [3 * i + 0.5 for i in range(3)]
    m = session_metrics(trials, det)
    assert m.tnr == 18 / 21


def test_far_two_intervals_one_contaminated():
    assert far_counts(cor(0, 2.0), [0.5]) == (2, 1)


def test_far_discards_partial_interval():
    assert far_counts(cor(0, 2.9), [2.5]) == (2, 0)
    assert far_counts(err(0, 1.3), [0.2, 0.9]) == (1, 1)


def test_pre_onset_plus_hit_counts_for_edr_only():
    trials = [err(0, 1.3, 6, 0), cor(10, 12, 1)]
    m = session_metrics(trials, [1.0, 2.3])
    assert m.edr == 1.0 and m.tpr == 0.0


def test_empty_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        session_metrics([cor()], [])


def brute_force_far(trials, det, interval=1.0):
    n = c = 0
    for t in trials:
        stop = t.onset if t.is_error else t.end
        a = t.start
        while a + interval <= stop + 1e-9:
            n += 1
            c += any(a <= d < a + interval for d in det)
            a += interval
    return n, c


def random_session(rng, n_trials=12):
    trials, t = [], 0.0
    for i in range(n_trials):
        if i % 3 == 0:
            onset = t + rng.uniform(0.75, 1.875)
            end = t + rng.choice([6.0, rng.uniform(2.5, 8.0)])
            trials.append(err(t, onset, end, i))
        else:
            end = t + rng.uniform(1.5, 3.0)
            trials.append(cor(t, end, i))
        t = end + 1.5
    det = np.sort(rng.uniform(0, t, rng.integers(0, 15)))
    return trials, det


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_metric_invariants(seed):
    trials, det = random_session(np.random.default_rng(seed))
    m = session_metrics(trials, det)
    assert m.tpr <= m.edr
    for v in (m.tpr, m.tnr, m.edr, m.far):
        assert 0.0 <= v <= 1.0
    inside = [d for d in det if any(t.start <= d <= t.end for t in trials)]
    assert (m.far_intervals, m.far_contaminated) == brute_force_far(trials, inside)


# --- virtual onsets ---------------------------------------------------------------

def test_virtual_onset_is_mean_latency():
    trials = [err(0, 1.2, 6, 0), err(10, 11.4, 16, 1), cor(20, 22, 2)]
    assert virtual_onsets(trials)[2] == pytest.approx(21.3)


def test_virtual_onset_single_error():
    assert virtual_onsets([err(0, 1.5, 6, 0), cor(7, 9, 1)]) == {1: 8.5}


def test_virtual_onset_needs_error_trial():
    with pytest.raises(UndefinedMetricError):
        virtual_onsets([cor()])


# --- threshold sweep --------------------------------------------------------------

def sweep_fixture(seed=0):
    rng = np.random.default_rng(seed)
    trials, t = [], 0.0
    for i in range(30):
        if i % 3 == 0:
            trials.append(err(t, t + 1.3, t + 6, i))
            t += 6
        else:
            trials.append(cor(t, t + 2, i))
            t += 2
        t += 1.5
    times = 0.45 + 0.018 * np.arange(int((t - 0.45) / 0.018))
    probs = rng.uniform(0, 1, times.size)
    for tr in trials:
        if tr.is_error:
            probs[(times > tr.onset + 0.2) & (times < tr.onset + 0.5)] = 0.95
    return [ProbabilityStream(times, probs)], trials


def test_grid_has_41_inclusive_points():
    g = tau_grid()
    assert g.size == 41 and g[0] == 0.0 and g[-1] == 1.0


def test_zero_threshold_rejects_every_correct_trial():
    streams, trials = sweep_fixture()
    sweep = threshold_sweep(streams, trials)
    assert sweep.tnr[0] == 0.0
    assert sweep.tpr[-1] == 0.0 and sweep.tnr[-1] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_tnr_non_decreasing(seed):
    streams, trials = sweep_fixture(seed)
    sweep = threshold_sweep(streams, trials)
    assert sweep.grid.size == 41
    assert np.all(np.diff(sweep.tnr) >= 0)
    assert np.all(sweep.tpr <= sweep.edr)


# --- smoothing and selection ------------------------------------------------------

def test_constant_curves_pick_smallest_threshold():
    tau, s_tpr, s_tnr = smooth_and_select(np.full(41, 0.6), np.full(41, 0.8))
    assert tau == 0.0
    assert np.all(s_tpr == 0.6) and np.all(s_tnr == 0.8)


def test_smoothing_constant_is_identity():
    assert np.all(moving_average(np.full(41, 0.37)) == 0.37)


def test_smoothing_shrinks_at_edges():
    x = np.arange(10, dtype=float)
    s = moving_average(x, 7)
    assert s[0] == 0.0 and s[1] == 1.0 and s[2] == 2.0 and s[5] == 5.0
    x = np.array([1.0, 0, 0, 0, 0, 0, 0, 0])
    assert moving_average(x, 7)[1] == pytest.approx(1 / 3)


def brute_force_select(tpr, tnr, window=7):
    """Exact rational smoothing and a first-maximum scan."""
    h = window // 2
    n = len(tpr)
    tpr = [Fraction(float(v)) for v in tpr]
    tnr = [Fraction(float(v)) for v in tnr]

    def smooth(v):
        return [sum(v[i - min(h, i, n - 1 - i):i + min(h, i, n - 1 - i) + 1])
                / (2 * min(h, i, n - 1 - i) + 1) for i in range(n)]

    prod = [a * b for a, b in zip(smooth(tpr), smooth(tnr))]
    best = 0
    for i in range(n):
        if prod[i] > prod[best]:
            best = i
    return best


def test_unimodal_product_peaks_at_065():
    g = tau_grid()
    tpr = np.exp(-((g - 0.65) / 0.2) ** 2)
    tnr = np.ones(41)
    assert smooth_and_select(tpr, tnr)[0] == pytest.approx(0.65)
    assert g[brute_force_select(list(tpr), list(tnr))] == pytest.approx(0.65)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_selection_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    # curves on a coarse lattice of rates, as produced by trial counts
    tpr = np.sort(rng.integers(0, 10, 41))[::-1] / 9
    tnr = np.sort(rng.integers(0, 22, 41)) / 21
    tau = smooth_and_select(tpr, tnr)[0]
    assert tau == tau_grid()[brute_force_select(list(tpr), list(tnr))]


def test_curve_length_mismatch_raises():
    with pytest.raises(ValueError):
        smooth_and_select(np.zeros(40), np.zeros(41))


# --- permutation p-values -------------------------------------------------------

def test_p_value_floor_and_ceiling():
    null = np.linspace(0, 0.5, 500)
    assert permutation_p_value(0.9, null) == pytest.approx(1 / 501)
    assert permutation_p_value(-1.0, null) == 1.0
    assert math.isnan(permutation_p_value(0.5, []))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0, 1), min_size=1, max_size=200))
def test_p_value_range(obs, null):
    p = permutation_p_value(obs, null)
    assert 1 / (len(null) + 1) <= p <= 1.0


# --- folds ----------------------------------------------------------------------

def test_folds_partition_trials():
    rng = np.random.default_rng(0)
    ids = np.arange(240)
    labels = (ids % 10 < 3).astype(int)
    folds = stratified_folds(ids, labels, 5, rng)
    assert len(folds) == 5
    assert sorted(np.concatenate(folds).tolist()) == ids.tolist()
    for f in folds:
        assert abs(np.sum(labels[f]) - 72 / 5) <= 1


def test_cross_validation_has_50_leak_free_folds(closed_loop_session):
    res = cross_validate(closed_loop_session, reps=10, folds=5, seed=3)
    assert res.tpr_curves.shape == (50, 41) and res.tnr_curves.shape == (50, 41)
    assert np.allclose(res.tpr, res.tpr_curves.mean(axis=0))
    all_ids = {t.trial_id for t in closed_loop_session.trials}
    for rec in res.folds:
        assert not set(rec["test_ids"]) & set(rec["train_ids"])
    for r in range(10):
        tests = [set(f["test_ids"]) for f in res.folds if f["rep"] == r]
        assert set().union(*tests) == all_ids and sum(map(len, tests)) == len(all_ids)
    assert 0.0 <= res.tpr_at_tau <= 1.0


def test_cross_validation_needs_enough_trials(closed_loop_session):
    with pytest.raises(ValueError):
        cross_validate(closed_loop_session, reps=1, folds=100)


# --- electrophysiology statistics ---------------------------------------------------

def test_rank_sum_matches_textbook_normal_approximation():
    rng = np.random.default_rng(1)
    x = np.round(rng.normal(0, 1, 40), 1)
    y = np.round(rng.normal(0.5, 1, 30), 1)
    # independent oracle: ranks with ties averaged, tie-corrected variance
    allv = np.concatenate([x, y])
    order = np.argsort(allv, kind="stable")
    ranks = np.empty(allv.size)
    ranks[order] = np.arange(1, allv.size + 1)
    for v in np.unique(allv):
        ranks[allv == v] = ranks[allv == v].mean()
    n1, n2, n = x.size, y.size, allv.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2
    _, counts = np.unique(allv, return_counts=True)
    var = n1 * n2 / 12 * ((n + 1) - np.sum(counts ** 3 - counts) / (n * (n - 1)))
    z = (abs(u - n1 * n2 / 2) - 0.5) / np.sqrt(var)
    p = erfc(z / np.sqrt(2))
    assert rank_sum_test(x, y) == pytest.approx(p, rel=1e-9)


def test_constant_samples_give_p_one():
    assert rank_sum_test(np.ones(10), np.ones(10)) == 1.0


def test_planted_difference_is_detected():
    rng = np.random.default_rng(2)
    n, ch, T = 500, 3, 225
    a = rng.normal(0, 3, (n, ch, T))
    b = rng.normal(0, 3, (n, ch, T))
    b[:, 1, 100:150] += 5.0
    st_ = erp_statistics(a, b)
    assert st_.significant[1, 100:150].mean() >= 0.8
    assert st_.significant[[0, 2]].sum() == 0


def test_ci_shrinks_with_square_root():
    rng = np.random.default_rng(3)
    w1 = np.diff(confidence_interval(rng.normal(0, 1, (400, 200))), axis=0).mean()
    w4 = np.diff(confidence_interval(rng.normal(0, 1, (1600, 200))), axis=0).mean()
    assert w1 / w4 == pytest.approx(2.0, rel=0.1)


def test_ci_half_width_is_196_sem():
    x = np.random.default_rng(4).normal(0, 1, (50, 1, 5))
    ci = confidence_interval(x)
    sem = x.std(axis=0, ddof=1) / np.sqrt(50)
    assert np.allclose((ci[1] - ci[0]) / 2, 1.96 * sem)


def test_erp_statistics_needs_five_epochs():
    with pytest.raises(ValueError):
        erp_statistics(np.zeros((4, 1, 3)), np.zeros((10, 1, 3)))
